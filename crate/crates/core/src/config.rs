//! Workload presets, run configuration files and input generation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Segmentation;
use crate::pattern::{Boundary, Pattern, PatternSection, WindowSpec};
use crate::reference::FloatTensor;
use crate::scheduler::{ArrayConfig, BufferConfig};
use crate::simulator::{FixedDatapath, SimConfig};

/// Shape of a preset's attention pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    /// 1-D sequence with a centered window of `window` keys.
    Sequence { n: usize, window: usize },
    /// Flattened `side x side` image with a centered `kernel x kernel` window.
    Image { side: usize, kernel: usize },
}

/// A named single-head attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub hidden: usize,
    pub heads: usize,
    pub shape: Shape,
    pub globals: Vec<usize>,
    pub boundary: Boundary,
}

/// Every preset name accepted by [`preset`].
pub const PRESET_NAMES: [&str; 6] = [
    "longformer",
    "vil-stage1",
    "vil-stage2",
    "longformer-desk",
    "vil-stage1-desk",
    "vil-stage2-desk",
];

/// Looks up a preset. Full-size presets: Longformer-base-4096 (hidden 768,
/// 12 heads), ViL stage 1 (hidden 192, 3 heads) and stage 2 (hidden 384,
/// 6 heads), each with token 0 global and wrapped windows.
pub fn preset(name: &str) -> Result<Preset> {
    let make = |hidden, heads, shape| Preset {
        name: name.to_string(),
        hidden,
        heads,
        shape,
        globals: vec![0],
        boundary: Boundary::Wrap,
    };
    Ok(match name {
        "longformer" => make(
            768,
            12,
            Shape::Sequence {
                n: 4096,
                window: 512,
            },
        ),
        "vil-stage1" => make(
            192,
            3,
            Shape::Image {
                side: 56,
                kernel: 15,
            },
        ),
        "vil-stage2" => make(
            384,
            6,
            Shape::Image {
                side: 28,
                kernel: 15,
            },
        ),
        "longformer-desk" => make(768, 12, Shape::Sequence { n: 256, window: 32 }),
        "vil-stage1-desk" => make(
            192,
            3,
            Shape::Image {
                side: 14,
                kernel: 5,
            },
        ),
        "vil-stage2-desk" => make(384, 6, Shape::Image { side: 7, kernel: 5 }),
        _ => return Err(Error::UnknownPreset(name.to_string())),
    })
}

impl Preset {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn seq_len(&self) -> usize {
        match self.shape {
            Shape::Sequence { n, .. } => n,
            Shape::Image { side, .. } => side * side,
        }
    }

    pub fn pattern(&self) -> Result<Pattern> {
        let p = match self.shape {
            Shape::Sequence { n, window } => {
                Pattern::new(n, vec![WindowSpec::centered(window)?], self.boundary)?
            }
            Shape::Image { side, kernel } => {
                Pattern::window_2d(side, side, kernel, kernel, self.boundary)?
            }
        };
        p.with_globals(self.globals.iter().copied())
    }

    /// Rescales to about `n` tokens. Sequences keep `window / n`; images
    /// take the side `floor(sqrt(n))` and the nearest odd kernel to the
    /// proportionally scaled one.
    pub fn scaled(&self, n: usize) -> Result<Preset> {
        if n == 0 {
            return Err(Error::InvalidConfig("scale-n must be >= 1".into()));
        }
        let shape = match self.shape {
            Shape::Sequence { n: n0, window } => {
                let w = ((window as f64 * n as f64 / n0 as f64).round() as usize).clamp(1, n);
                Shape::Sequence { n, window: w }
            }
            Shape::Image { side, kernel } => {
                let s = (n as f64).sqrt().floor() as usize;
                let k = kernel as f64 * s as f64 / side as f64;
                let odd = (2.0 * ((k - 1.0) / 2.0).round() + 1.0).max(1.0) as usize;
                Shape::Image {
                    side: s,
                    kernel: odd.min(if s % 2 == 1 { s } else { s - 1 }).max(1),
                }
            }
        };
        Ok(Preset {
            name: format!("{}@{n}", self.name),
            shape,
            ..self.clone()
        })
    }
}

/// Arithmetic used by the simulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumberMode {
    #[default]
    Float,
    Fixed,
}

impl NumberMode {
    /// Largest accepted `max_rel_diff` against the oracle for `verify`.
    pub fn tolerance(self) -> f64 {
        match self {
            NumberMode::Float => FLOAT_TOLERANCE,
            NumberMode::Fixed => FIXED_TOLERANCE,
        }
    }
}

impl std::fmt::Display for NumberMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NumberMode::Float => "float",
            NumberMode::Fixed => "fixed",
        })
    }
}

impl std::str::FromStr for NumberMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(NumberMode::Float),
            "fixed" => Ok(NumberMode::Fixed),
            _ => Err(Error::Parse(format!(
                "unknown number mode `{s}` (float|fixed)"
            ))),
        }
    }
}

/// Float-mode agreement with the oracle (relative).
pub const FLOAT_TOLERANCE: f64 = 1e-9;
/// Fixed-mode agreement with the oracle (relative), for default inputs.
pub const FIXED_TOLERANCE: f64 = 0.25;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub preset: Option<String>,
    pub scale_n: Option<usize>,
    pub head_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraySection {
    pub rows: usize,
    pub cols: usize,
    pub global_row: bool,
    pub global_col: bool,
    pub buffers: BufferConfig,
}

impl Default for ArraySection {
    fn default() -> Self {
        ArraySection {
            rows: 32,
            cols: 32,
            global_row: true,
            global_col: true,
            buffers: BufferConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSection {
    pub mode: NumberMode,
    pub pwl_segments: usize,
    pub pwl_min: f64,
    pub pwl_max: f64,
    pub segmentation: Segmentation,
}

impl Default for NumericsSection {
    fn default() -> Self {
        NumericsSection {
            mode: NumberMode::Float,
            pwl_segments: 64,
            pwl_min: -8.0,
            pwl_max: 8.0,
            segmentation: Segmentation::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub seed: u64,
    pub amplitude: f64,
    pub q: Option<PathBuf>,
    pub k: Option<PathBuf>,
    pub v: Option<PathBuf>,
}

impl Default for InputSection {
    fn default() -> Self {
        InputSection {
            seed: 1,
            amplitude: 1.0,
            q: None,
            k: None,
            v: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub include_overhead: bool,
}

/// Everything one CLI run needs, loadable from a sectioned TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workload: WorkloadSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern: Option<PatternSection>,
    pub array: ArraySection,
    pub numerics: NumericsSection,
    pub sim: SimConfig,
    pub inputs: InputSection,
    pub report: ReportSection,
}

/// A run's pattern with the name and head dimension it was built from.
#[derive(Clone, Debug)]
pub struct Workload {
    pub name: String,
    pub pattern: Pattern,
    pub head_dim: usize,
}

/// Head dimension for inline patterns without an explicit one.
pub const DEFAULT_HEAD_DIM: usize = 64;

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Builds the pattern from the preset (optionally rescaled) or the
    /// inline `[pattern]` section.
    pub fn workload(&self) -> Result<Workload> {
        match (&self.workload.preset, &self.pattern) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "give either a preset or a [pattern] section, not both".into(),
            )),
            (Some(name), None) => {
                let mut p = preset(name)?;
                if let Some(n) = self.workload.scale_n {
                    p = p.scaled(n)?;
                }
                Ok(Workload {
                    name: p.name.clone(),
                    pattern: p.pattern()?,
                    head_dim: self.workload.head_dim.unwrap_or(p.head_dim()),
                })
            }
            (None, Some(section)) => {
                if self.workload.scale_n.is_some() {
                    return Err(Error::InvalidConfig(
                        "scale-n applies to presets only".into(),
                    ));
                }
                Ok(Workload {
                    name: "custom".into(),
                    pattern: section.build()?,
                    head_dim: self.workload.head_dim.unwrap_or(DEFAULT_HEAD_DIM),
                })
            }
            (None, None) => Err(Error::InvalidConfig(
                "no preset and no [pattern] section".into(),
            )),
        }
    }

    pub fn array_config(&self, head_dim: usize) -> Result<ArrayConfig> {
        let a = &self.array;
        let cfg = ArrayConfig {
            rows: a.rows,
            cols: a.cols,
            head_dim,
            has_global_row: a.global_row,
            has_global_col: a.global_col,
            buffers: a.buffers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fixed_datapath(&self) -> Result<FixedDatapath> {
        let n = &self.numerics;
        FixedDatapath::from_params(n.pwl_segments, n.pwl_min, n.pwl_max, n.segmentation)
    }

    /// Q, K and V: read from the configured files, or generated from the
    /// seed (`seed`, `seed + 1`, `seed + 2`).
    pub fn inputs(&self, n: usize, d: usize) -> Result<[FloatTensor<f64>; 3]> {
        let inp = &self.inputs;
        let load = |path: &Option<PathBuf>, offset: u64| -> Result<FloatTensor<f64>> {
            let t = match path {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
                    FloatTensor::from_text(&text)?
                }
                None => FloatTensor::random(n, d, inp.seed.wrapping_add(offset), inp.amplitude),
            };
            if (t.rows(), t.cols()) != (n, d) {
                return Err(Error::Shape(format!(
                    "input is {}x{}, workload needs {n}x{d}",
                    t.rows(),
                    t.cols()
                )));
            }
            Ok(t)
        };
        Ok([load(&inp.q, 0)?, load(&inp.k, 1)?, load(&inp.v, 2)?])
    }
}

/// Parses `RxC` array geometry.
pub fn parse_array(text: &str) -> Result<(usize, usize)> {
    let (r, c) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Parse(format!("array `{text}` is not RxC")))?;
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("array `{text}` is not RxC")))
    };
    Ok((num(r)?, num(c)?))
}
