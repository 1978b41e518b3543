//! PE arithmetic: fixed-point formats, the piecewise-linear exponential and
//! the row divider.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary fixed-point format with `frac_bits` fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    pub total_bits: u32,
    pub frac_bits: u32,
    pub signed: bool,
}

impl FixedFormat {
    /// Q/K/V operands: signed 8 bits, 4 of them fractional.
    pub const INPUT: FixedFormat = FixedFormat::signed(8, 4);
    /// Stage-1 dot products (24-bit accumulator).
    pub const SCORE: FixedFormat = FixedFormat::signed(24, 8);
    /// Exponentials held in `Reg_acc` after stage 2.
    pub const EXP: FixedFormat = FixedFormat::unsigned(24, 12);
    /// Inverse of a row sum, broadcast back after stage 3.
    pub const RECIP: FixedFormat = FixedFormat::unsigned(32, 16);
    /// Normalized probabilities after stage 4.
    pub const PROB: FixedFormat = FixedFormat::unsigned(16, 15);
    /// 16-bit attention outputs.
    pub const OUTPUT: FixedFormat = FixedFormat::signed(16, 11);

    pub const fn signed(total_bits: u32, frac_bits: u32) -> Self {
        FixedFormat {
            total_bits,
            frac_bits,
            signed: true,
        }
    }

    pub const fn unsigned(total_bits: u32, frac_bits: u32) -> Self {
        FixedFormat {
            total_bits,
            frac_bits,
            signed: false,
        }
    }

    pub fn max_raw(&self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits - 1)) - 1
        } else {
            (1i64 << self.total_bits) - 1
        }
    }

    pub fn min_raw(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.total_bits - 1))
        } else {
            0
        }
    }

    pub fn lsb(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.lsb()
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 * self.lsb()
    }

    pub fn saturate(&self, raw: i128) -> i64 {
        raw.clamp(self.min_raw() as i128, self.max_raw() as i128) as i64
    }
}

/// A raw fixed-point value tagged with its format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fixed {
    pub raw: i64,
    pub format: FixedFormat,
}

impl Fixed {
    pub fn to_f64(self) -> f64 {
        self.raw as f64 * self.format.lsb()
    }
}

/// Round-to-nearest-even, saturating at the format bounds. NaN maps to 0.
pub fn quantize(x: f64, format: FixedFormat) -> Fixed {
    let raw = if x.is_nan() {
        0
    } else {
        let scaled = (x * (format.frac_bits as f64).exp2()).round_ties_even();
        scaled.clamp(format.min_raw() as f64, format.max_raw() as f64) as i64
    };
    Fixed { raw, format }
}

pub fn dequantize(x: Fixed) -> f64 {
    x.to_f64()
}

/// `value / 2^shift`, rounded half to even.
pub fn round_shift(value: i128, shift: u32) -> i128 {
    if shift == 0 {
        return value;
    }
    div_round_even(value, 1i128 << shift)
}

/// `num / den` for `den > 0`, rounded half to even.
pub fn div_round_even(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

/// Changes the number of fractional bits, rounding and saturating.
pub fn requantize(x: Fixed, format: FixedFormat) -> Fixed {
    let raw = x.raw as i128;
    let raw = if format.frac_bits >= x.format.frac_bits {
        raw << (format.frac_bits - x.format.frac_bits)
    } else {
        round_shift(raw, x.format.frac_bits - format.frac_bits)
    };
    Fixed {
        raw: format.saturate(raw),
        format,
    }
}

/// Row divider: `1 / x` in [`FixedFormat::RECIP`], computed exactly and then
/// rounded.
///
/// Panics when `x <= 0`; row sums of exponentials are always positive.
pub fn reciprocal(x: Fixed) -> Fixed {
    assert!(x.raw > 0, "reciprocal of a non-positive value");
    let out = FixedFormat::RECIP;
    let num = 1i128 << (out.frac_bits + x.format.frac_bits);
    Fixed {
        raw: out.saturate(div_round_even(num, x.raw as i128)),
        format: out,
    }
}

/// How segment breakpoints are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Segmentation {
    /// Equal-width segments (uniform relative error for `exp`).
    #[default]
    Uniform,
    /// Breakpoints placed so every segment has the same minimax error.
    EqualError,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PwlSegment {
    pub x_lo: f64,
    pub slope: f64,
    pub intercept: f64,
}

/// Piecewise-linear approximation of `exp` on `[x_min, x_max]`: the slope
/// and intercept lookup tables of a PE.
#[derive(Clone, Debug, PartialEq)]
pub struct PwlExpTable {
    segments: Vec<PwlSegment>,
    x_min: f64,
    x_max: f64,
    max_abs_err: f64,
}

// Minimax line for exp on [a, b]: the chord slope, shifted down by half the
// gap between the chord and the parallel tangent.
fn minimax_line(a: f64, b: f64) -> (f64, f64, f64) {
    let (fa, fb) = (a.exp(), b.exp());
    let slope = if b - a > 1e-12 {
        (fb - fa) / (b - a)
    } else {
        fa
    };
    let c = slope.ln().clamp(a, b);
    let at_a = fa - slope * a;
    let at_c = c.exp() - slope * c;
    ((slope), (at_a + at_c) / 2.0, (at_a - at_c) / 2.0)
}

// Slope of the best line through (x0, y0), y0 <= exp(x0), on [x0, x1]:
// balances the overshoot at the tangent point against the undershoot at x1.
fn anchored_slope(x0: f64, y0: f64, x1: f64) -> f64 {
    let over = |m: f64| {
        let t = m.max(f64::MIN_POSITIVE).ln().clamp(x0, x1);
        y0 + m * (t - x0) - t.exp()
    };
    let under = |m: f64| x1.exp() - (y0 + m * (x1 - x0));
    let (mut lo, mut hi) = (0.0, 2.0 * (x1.exp() - y0) / (x1 - x0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if over(mid) < under(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn widest_within(a: f64, x_max: f64, err: f64) -> f64 {
    if minimax_line(a, x_max).2 <= err {
        return x_max;
    }
    let (mut lo, mut hi) = (a, x_max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if minimax_line(a, mid).2 <= err {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn equal_error_breaks(n: usize, x_min: f64, x_max: f64) -> Vec<f64> {
    let count = |err: f64| {
        let mut a = x_min;
        let mut k = 0;
        while a < x_max && k <= n {
            a = widest_within(a, x_max, err);
            k += 1;
        }
        k
    };
    let mut hi = minimax_line(x_min, x_max).2;
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if count(mid) <= n {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut breaks = vec![x_min];
    let mut a = x_min;
    while a < x_max && breaks.len() <= n {
        a = widest_within(a, x_max, hi);
        breaks.push(a);
    }
    *breaks.last_mut().unwrap() = x_max;
    // pad to exactly n segments by halving the widest
    while breaks.len() < n + 1 {
        let k = (0..breaks.len() - 1)
            .max_by(|&i, &j| (breaks[i + 1] - breaks[i]).total_cmp(&(breaks[j + 1] - breaks[j])))
            .unwrap();
        breaks.insert(k + 1, 0.5 * (breaks[k] + breaks[k + 1]));
    }
    breaks
}

/// Builds an `n_segments` table on `[x_min, x_max]` with a minimax linear fit
/// per segment, refitting a segment through its predecessor's end where the
/// independent fits would step down, so the table is monotone. The achieved
/// error is measured numerically.
pub fn build_pwl_table(
    n_segments: usize,
    x_min: f64,
    x_max: f64,
    segmentation: Segmentation,
) -> Result<PwlExpTable> {
    if n_segments == 0 || x_min >= x_max || !x_min.is_finite() || !x_max.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "pwl table needs n >= 1 and x_min < x_max (got {n_segments}, {x_min}, {x_max})"
        )));
    }
    let breaks: Vec<f64> = match segmentation {
        Segmentation::Uniform => (0..=n_segments)
            .map(|k| x_min + (x_max - x_min) * k as f64 / n_segments as f64)
            .collect(),
        Segmentation::EqualError => equal_error_breaks(n_segments, x_min, x_max),
    };
    let mut segments: Vec<PwlSegment> = breaks
        .windows(2)
        .map(|w| {
            let (slope, intercept, _) = minimax_line(w[0], w[1]);
            PwlSegment {
                x_lo: w[0],
                slope,
                intercept,
            }
        })
        .collect();
    // a segment starting below its predecessor's end is refitted through
    // that end point, keeping the table continuous there
    for k in 1..segments.len() {
        let (x0, x1) = (breaks[k], breaks[k + 1]);
        let prev_end = segments[k - 1].slope * x0 + segments[k - 1].intercept;
        if segments[k].slope * x0 + segments[k].intercept < prev_end {
            let slope = anchored_slope(x0, prev_end, x1);
            segments[k].slope = slope;
            segments[k].intercept = prev_end - slope * x0;
        }
    }
    let mut table = PwlExpTable {
        segments,
        x_min,
        x_max,
        max_abs_err: 0.0,
    };
    table.max_abs_err = table.measure_error();
    Ok(table)
}

impl PwlExpTable {
    pub fn segments(&self) -> &[PwlSegment] {
        &self.segments
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn max_abs_err(&self) -> f64 {
        self.max_abs_err
    }

    fn segment_index(&self, x: f64) -> usize {
        self.segments
            .partition_point(|s| s.x_lo <= x)
            .saturating_sub(1)
    }

    /// Approximate `exp(x)`, with `x` clamped to the table range. The result
    /// never drops below `exp(x_min)`, so it is always positive.
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(self.x_min, self.x_max);
        let s = self.segments[self.segment_index(x)];
        (s.slope * x + s.intercept).max(self.x_min.exp())
    }

    fn segment_end(&self, k: usize) -> f64 {
        self.segments.get(k + 1).map_or(self.x_max, |s| s.x_lo)
    }

    fn measure_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, s) in self.segments.iter().enumerate() {
            let (a, b) = (s.x_lo, self.segment_end(k));
            let mut probe = |x: f64| {
                let y = (s.slope * x + s.intercept).max(self.x_min.exp());
                worst = worst.max((y - x.exp()).abs());
            };
            for t in 0..=512 {
                probe(a + (b - a) * t as f64 / 512.0);
            }
            probe(s.slope.ln().clamp(a, b));
        }
        worst
    }

    /// Text dump: a header line then one `x_lo slope intercept` triple per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# pwl-exp segments={} x_min={} x_max={} max_abs_err={}\n",
            self.segments.len(),
            self.x_min,
            self.x_max,
            self.max_abs_err
        );
        for s in &self.segments {
            let _ = writeln!(out, "{} {} {}", s.x_lo, s.slope, s.intercept);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty pwl table".into()))?;
        let field = |key: &str| -> Result<f64> {
            header
                .split_whitespace()
                .find_map(|tok| tok.strip_prefix(key))
                .ok_or_else(|| Error::Parse(format!("pwl header lacks `{key}`")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(e.to_string()))
        };
        let (x_min, x_max) = (field("x_min=")?, field("x_max=")?);
        let mut segments = Vec::new();
        for line in lines {
            let nums = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if nums.len() != 3 {
                return Err(Error::Parse(format!("bad pwl segment line `{line}`")));
            }
            segments.push(PwlSegment {
                x_lo: nums[0],
                slope: nums[1],
                intercept: nums[2],
            });
        }
        if segments.is_empty() || segments.windows(2).any(|w| w[0].x_lo >= w[1].x_lo) {
            return Err(Error::Parse(
                "pwl segments must be non-empty and sorted".into(),
            ));
        }
        let mut table = PwlExpTable {
            segments,
            x_min,
            x_max,
            max_abs_err: 0.0,
        };
        table.max_abs_err = table.measure_error();
        Ok(table)
    }
}

/// Fixed-point realisation of a [`PwlExpTable`]: breakpoints in the score
/// format, slopes with 16 and intercepts with 24 fractional bits. One lookup
/// and one multiply-accumulate per evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPwl {
    breaks: Vec<i64>,
    slopes: Vec<i64>,
    intercepts: Vec<i64>,
    x_min: i64,
    x_max: i64,
    floor: i64,
}

const SLOPE_FRAC: u32 = 16;
const INTERCEPT_FRAC: u32 = 24;
// aligns intercepts with slope * score products
const INTERCEPT_SHIFT: u32 = SLOPE_FRAC + 8 - INTERCEPT_FRAC;

impl FixedPwl {
    pub fn new(table: &PwlExpTable) -> Self {
        let score = FixedFormat::SCORE;
        let exp = FixedFormat::EXP;
        let q = |x: f64, frac: u32| (x * (frac as f64).exp2()).round_ties_even() as i64;
        let mut pwl = FixedPwl {
            breaks: table
                .segments
                .iter()
                .map(|s| quantize(s.x_lo, score).raw)
                .collect(),
            slopes: table
                .segments
                .iter()
                .map(|s| q(s.slope, SLOPE_FRAC))
                .collect(),
            intercepts: table
                .segments
                .iter()
                .map(|s| q(s.intercept, INTERCEPT_FRAC))
                .collect(),
            x_min: quantize(table.x_min, score).raw,
            x_max: quantize(table.x_max, score).raw,
            floor: quantize(table.x_min.exp(), exp).raw.max(1),
        };
        // coefficient rounding can open a step at a breakpoint; close it
        for k in 1..pwl.breaks.len() {
            let b = pwl.breaks[k];
            let before = pwl.acc(k - 1, b - 1);
            let at = pwl.acc(k, b);
            if at < before {
                pwl.intercepts[k] += ((before - at) >> INTERCEPT_SHIFT) as i64 + 1;
            }
        }
        pwl
    }

    fn acc(&self, k: usize, x: i64) -> i128 {
        self.slopes[k] as i128 * x as i128 + ((self.intercepts[k] as i128) << INTERCEPT_SHIFT)
    }

    /// `exp` of a raw score (8 fractional bits) as a raw [`FixedFormat::EXP`] value.
    pub fn eval_raw(&self, score_raw: i64) -> i64 {
        let x = score_raw.clamp(self.x_min, self.x_max);
        let k = self.breaks.partition_point(|&b| b <= x).saturating_sub(1);
        let frac_x = FixedFormat::SCORE.frac_bits;
        let y = round_shift(
            self.acc(k, x),
            SLOPE_FRAC + frac_x - FixedFormat::EXP.frac_bits,
        );
        FixedFormat::EXP.saturate(y).max(self.floor)
    }
}

/// Stage-2 exponential on a fixed-point score.
pub fn pwl_exp(table: &FixedPwl, x: Fixed) -> Fixed {
    let score = requantize(x, FixedFormat::SCORE);
    Fixed {
        raw: table.eval_raw(score.raw),
        format: FixedFormat::EXP,
    }
}
