//! Command-line arguments and their translation into a [`RunConfig`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sparse_accel::config::{parse_array, NumberMode, RunConfig};
use sparse_accel::pattern::PatternSection;
use sparse_accel::{Boundary, Error, Result, WindowSpec};

#[derive(Debug, Parser)]
#[command(
    name = "sparse-accel",
    version,
    about = "Cycle-level model of a hybrid sparse attention accelerator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the cycle-level simulator and report cycles, utilization and reuse.
    Simulate(RunArgs),
    /// Run the dense masked-attention reference only.
    Oracle(RunArgs),
    /// Dump the tile schedule, one line per pass.
    Schedule(RunArgs),
    /// Report pattern density.
    Stats(RunArgs),
    /// Simulate, run the reference and compare; exits 1 when out of tolerance.
    Verify(RunArgs),
    /// Estimate cycles for one workload on several array sizes.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BoundaryArg {
    Clip,
    Wrap,
}

impl From<BoundaryArg> for Boundary {
    fn from(b: BoundaryArg) -> Self {
        match b {
            BoundaryArg::Clip => Boundary::Clip,
            BoundaryArg::Wrap => Boundary::Wrap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Float,
    Fixed,
}

impl From<ModeArg> for NumberMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Float => NumberMode::Float,
            ModeArg::Fixed => NumberMode::Fixed,
        }
    }
}

/// Workload, array and run options shared by every subcommand. Flags
/// override the values read from `--config`.
#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Named workload (longformer, vil-stage1, vil-stage2, *-desk).
    #[arg(long, conflicts_with_all = ["n", "window"])]
    pub preset: Option<String>,
    /// Rescale the preset to about this many tokens, keeping its density.
    #[arg(long, value_name = "N", requires = "preset")]
    pub scale_n: Option<usize>,
    /// Sequence length of an inline pattern.
    #[arg(long, requires = "window")]
    pub n: Option<usize>,
    /// Centered window size of an inline pattern.
    #[arg(long, requires = "n")]
    pub window: Option<usize>,
    /// Dilation of the inline window.
    #[arg(long, default_value_t = 1, requires = "window")]
    pub dilation: usize,
    /// Global token indices, comma separated (added to a preset's globals).
    #[arg(long, value_delimiter = ',')]
    pub globals: Vec<usize>,
    /// Window behaviour at sequence edges.
    #[arg(long, value_enum)]
    pub boundary: Option<BoundaryArg>,
    /// PE array geometry, RxC.
    #[arg(long, value_name = "RxC")]
    pub array: Option<String>,
    /// Head dimension.
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Number mode of the simulator.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Seed of the generated Q, K and V.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Do not scale scores by 1/sqrt(d).
    #[arg(long)]
    pub no_scale: bool,
    /// Overlap stage 5 of a pass with stage 1 of the next.
    #[arg(long)]
    pub overlap: bool,
    /// Count stage 2-4 cycles in the utilization denominator.
    #[arg(long)]
    pub include_overhead: bool,
    /// Directory for report files.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Array sizes to compare, comma separated RxC; the first is the baseline.
    #[arg(long, value_delimiter = ',', required = true)]
    pub arrays: Vec<String>,
}

impl RunArgs {
    /// Config file (or defaults) with every given flag applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(name) = &self.preset {
            cfg.workload.preset = Some(name.clone());
            cfg.pattern = None;
        }
        if let Some(n) = self.scale_n {
            cfg.workload.scale_n = Some(n);
        }
        if let (Some(n), Some(w)) = (self.n, self.window) {
            let c = WindowSpec::centered(w)?;
            let d = self.dilation as i64;
            cfg.workload.preset = None;
            cfg.workload.scale_n = None;
            cfg.pattern = Some(PatternSection {
                n,
                lo: Some(c.lo() * d),
                hi: Some(c.hi() * d),
                dilation: Some(self.dilation),
                windows: None,
                globals: Vec::new(),
                boundary: Boundary::Clip,
                blocks: None,
            });
        }
        if let Some(section) = &mut cfg.pattern {
            section.globals.extend(&self.globals);
            if let Some(b) = self.boundary {
                section.boundary = b.into();
            }
        }
        if let Some(text) = &self.array {
            let (rows, cols) = parse_array(text)?;
            cfg.array.rows = rows;
            cfg.array.cols = cols;
        }
        if let Some(d) = self.head_dim {
            cfg.workload.head_dim = Some(d);
        }
        if let Some(m) = self.mode {
            cfg.numerics.mode = m.into();
        }
        if let Some(s) = self.seed {
            cfg.inputs.seed = s;
        }
        if self.no_scale {
            cfg.sim.scale = false;
        }
        if self.overlap {
            cfg.sim.overlap = true;
        }
        if self.include_overhead {
            cfg.report.include_overhead = true;
        }
        if cfg.workload.preset.is_none() && cfg.pattern.is_none() {
            return Err(Error::InvalidConfig(
                "give --preset, --n/--window or a --config file".into(),
            ));
        }
        Ok(cfg)
    }

    /// Overrides that apply after the workload is built (presets only).
    pub fn preset_overrides(&self) -> (Vec<usize>, Option<Boundary>) {
        (self.globals.clone(), self.boundary.map(Into::into))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(argv: &[&str]) -> Result<RunConfig> {
        let cli = Cli::try_parse_from(argv).expect("arguments parse");
        match cli.command {
            Command::Stats(a) => a.run_config(),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inline_window_is_centered_and_dilated() {
        let cfg = parse(&[
            "x",
            "stats",
            "--n",
            "40",
            "--window",
            "4",
            "--dilation",
            "3",
            "--globals",
            "1,2",
        ])
        .unwrap();
        let p = cfg.pattern.unwrap();
        assert_eq!((p.lo, p.hi, p.dilation), (Some(-6), Some(3), Some(3)));
        assert_eq!(p.globals, vec![1, 2]);
        assert!(cfg.workload.preset.is_none());
    }

    #[test]
    fn flags_override_defaults() {
        let cfg = parse(&[
            "x",
            "stats",
            "--preset",
            "longformer",
            "--scale-n",
            "256",
            "--array",
            "8x4",
            "--mode",
            "fixed",
            "--seed",
            "5",
            "--no-scale",
            "--overlap",
            "--include-overhead",
        ])
        .unwrap();
        assert_eq!(cfg.workload.scale_n, Some(256));
        assert_eq!((cfg.array.rows, cfg.array.cols), (8, 4));
        assert_eq!(cfg.numerics.mode, NumberMode::Fixed);
        assert_eq!(cfg.inputs.seed, 5);
        assert!(!cfg.sim.scale && cfg.sim.overlap && cfg.report.include_overhead);
    }

    #[test]
    fn preset_and_inline_pattern_conflict() {
        assert!(Cli::try_parse_from([
            "x",
            "stats",
            "--preset",
            "longformer",
            "--n",
            "8",
            "--window",
            "2"
        ])
        .is_err());
        assert!(Cli::try_parse_from(["x", "stats", "--n", "8"]).is_err());
    }

    #[test]
    fn a_workload_is_required() {
        assert!(matches!(
            parse(&["x", "stats"]),
            Err(Error::InvalidConfig(_))
        ));
    }
}
