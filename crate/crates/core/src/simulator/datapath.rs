use std::fmt::Debug;
use std::marker::PhantomData;

use num_traits::Float;

use crate::error::Result;
use crate::numerics::{
    build_pwl_table, div_round_even, reciprocal, round_shift, Fixed, FixedFormat, FixedPwl,
    PwlExpTable, Segmentation,
};

/// Arithmetic of one PE and of the weighted-sum module.
///
/// `Acc` is the content of `Reg_acc`: a score after stage 1, an exponential
/// after stage 2, and a normalized probability after stage 4. The broadcast
/// inverse of a row sum is also an `Acc`.
pub trait Datapath {
    type Elem: Copy + Default + Debug;
    type Acc: Copy + Default + Debug;
    type Sum: Copy + Default + Debug;
    type Psum: Copy + Default + Debug;
    type Out: Copy + Default + Debug;

    fn name(&self) -> &'static str;
    /// Converts a buffer value into an operand (quantizes in fixed mode).
    fn load(&self, x: f64) -> Self::Elem;
    fn mac(&self, acc: Self::Acc, q: Self::Elem, k: Self::Elem) -> Self::Acc;
    fn exp(&self, score: Self::Acc) -> Self::Acc;
    fn add(&self, sum: Self::Sum, e: Self::Acc) -> Self::Sum;
    fn reciprocal(&self, sum: Self::Sum) -> Self::Acc;
    fn normalize(&self, e: Self::Acc, inv: Self::Acc) -> Self::Acc;
    fn weighted_mac(&self, psum: Self::Psum, p: Self::Acc, v: Self::Elem) -> Self::Psum;
    /// Rounds a finished stage-5 partial sum into an output element.
    fn emit(&self, psum: Self::Psum) -> Self::Out;
    /// Weighted-sum module: folds `(vector, weight)` into the running state.
    fn merge(
        &self,
        running: &mut [Self::Out],
        running_weight: &mut Self::Sum,
        vector: &[Self::Out],
        weight: Self::Sum,
    );
    fn out_to_f64(&self, x: Self::Out) -> f64;
    fn sum_to_f64(&self, x: Self::Sum) -> f64;
    fn acc_to_f64(&self, x: Self::Acc) -> f64;
}

/// Exact exponential and floating-point arithmetic throughout. With `f64`
/// this is the golden mode.
#[derive(Clone, Copy, Debug, Default)]
pub struct FloatDatapath<T> {
    _scalar: PhantomData<T>,
}

impl<T> FloatDatapath<T> {
    pub fn new() -> Self {
        FloatDatapath {
            _scalar: PhantomData,
        }
    }
}

impl<T: Float + Default + Debug> Datapath for FloatDatapath<T> {
    type Elem = T;
    type Acc = T;
    type Sum = T;
    type Psum = T;
    type Out = T;

    fn name(&self) -> &'static str {
        if std::mem::size_of::<T>() == 8 {
            "float64"
        } else {
            "float32"
        }
    }

    fn load(&self, x: f64) -> T {
        T::from(x).unwrap()
    }

    fn mac(&self, acc: T, q: T, k: T) -> T {
        acc + q * k
    }

    fn exp(&self, score: T) -> T {
        score.exp()
    }

    fn add(&self, sum: T, e: T) -> T {
        sum + e
    }

    fn reciprocal(&self, sum: T) -> T {
        sum.recip()
    }

    fn normalize(&self, e: T, inv: T) -> T {
        e * inv
    }

    fn weighted_mac(&self, psum: T, p: T, v: T) -> T {
        psum + p * v
    }

    fn emit(&self, psum: T) -> T {
        psum
    }

    fn merge(&self, running: &mut [T], running_weight: &mut T, vector: &[T], weight: T) {
        let total = *running_weight + weight;
        let (a, b) = (*running_weight / total, weight / total);
        for (r, &x) in running.iter_mut().zip(vector) {
            *r = a * *r + b * x;
        }
        *running_weight = total;
    }

    fn out_to_f64(&self, x: T) -> f64 {
        x.to_f64().unwrap()
    }

    fn sum_to_f64(&self, x: T) -> f64 {
        x.to_f64().unwrap()
    }

    fn acc_to_f64(&self, x: T) -> f64 {
        x.to_f64().unwrap()
    }
}

/// 8-bit Q4.4 operands, PWL exponential, 16-bit outputs.
///
/// Register formats are the constants on [`FixedFormat`]: scores in
/// `SCORE`, exponentials in `EXP`, the broadcast inverse in `RECIP`,
/// probabilities in `PROB`, outputs in `OUTPUT`. Row sums and merge weights
/// keep the 12 fractional bits of `EXP` in a wide register.
#[derive(Clone, Debug)]
pub struct FixedDatapath {
    table: PwlExpTable,
    pwl: FixedPwl,
}

// stage-5 partial sums: PROB (15) + INPUT (4) fractional bits
const PSUM_FRAC: u32 = 19;

impl FixedDatapath {
    pub fn new(table: PwlExpTable) -> Self {
        let pwl = FixedPwl::new(&table);
        FixedDatapath { table, pwl }
    }

    /// 64 uniform segments over the default clamp range `[-8, 8]`.
    pub fn with_defaults() -> Self {
        Self::new(build_pwl_table(64, -8.0, 8.0, Segmentation::Uniform).expect("valid table"))
    }

    pub fn from_params(segments: usize, x_min: f64, x_max: f64, seg: Segmentation) -> Result<Self> {
        Ok(Self::new(build_pwl_table(segments, x_min, x_max, seg)?))
    }

    pub fn table(&self) -> &PwlExpTable {
        &self.table
    }
}

impl Default for FixedDatapath {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl Datapath for FixedDatapath {
    type Elem = i32;
    type Acc = i64;
    type Sum = i64;
    type Psum = i64;
    type Out = i32;

    fn name(&self) -> &'static str {
        "fixed"
    }

    fn load(&self, x: f64) -> i32 {
        crate::numerics::quantize(x, FixedFormat::INPUT).raw as i32
    }

    fn mac(&self, acc: i64, q: i32, k: i32) -> i64 {
        FixedFormat::SCORE.saturate(acc as i128 + q as i128 * k as i128)
    }

    fn exp(&self, score: i64) -> i64 {
        self.pwl.eval_raw(score)
    }

    fn add(&self, sum: i64, e: i64) -> i64 {
        sum + e
    }

    fn reciprocal(&self, sum: i64) -> i64 {
        reciprocal(Fixed {
            raw: sum,
            format: FixedFormat::EXP,
        })
        .raw
    }

    fn normalize(&self, e: i64, inv: i64) -> i64 {
        let shift =
            FixedFormat::EXP.frac_bits + FixedFormat::RECIP.frac_bits - FixedFormat::PROB.frac_bits;
        FixedFormat::PROB.saturate(round_shift(e as i128 * inv as i128, shift))
    }

    fn weighted_mac(&self, psum: i64, p: i64, v: i32) -> i64 {
        psum + p * v as i64
    }

    fn emit(&self, psum: i64) -> i32 {
        FixedFormat::OUTPUT.saturate(round_shift(
            psum as i128,
            PSUM_FRAC - FixedFormat::OUTPUT.frac_bits,
        )) as i32
    }

    fn merge(&self, running: &mut [i32], running_weight: &mut i64, vector: &[i32], weight: i64) {
        let total = *running_weight as i128 + weight as i128;
        for (r, &x) in running.iter_mut().zip(vector) {
            let num = *running_weight as i128 * *r as i128 + weight as i128 * x as i128;
            *r = FixedFormat::OUTPUT.saturate(div_round_even(num, total)) as i32;
        }
        *running_weight = total as i64;
    }

    fn out_to_f64(&self, x: i32) -> f64 {
        x as f64 * FixedFormat::OUTPUT.lsb()
    }

    fn sum_to_f64(&self, x: i64) -> f64 {
        x as f64 * FixedFormat::EXP.lsb()
    }

    fn acc_to_f64(&self, x: i64) -> f64 {
        x as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_softmax_of_two_equal_scores() {
        let dp = FixedDatapath::with_defaults();
        let e = dp.exp(0);
        let sum = dp.add(dp.add(0, e), e);
        let inv = dp.reciprocal(sum);
        let p = dp.normalize(e, inv);
        assert_eq!(p, 1 << 14, "half in Q.15");
        let v = dp.load(1.5);
        let out = dp.emit(dp.weighted_mac(dp.weighted_mac(0, p, v), p, v));
        assert_eq!(dp.out_to_f64(out), 1.5);
    }

    #[test]
    fn fixed_mac_saturates_at_24_bits() {
        let dp = FixedDatapath::with_defaults();
        let mut acc = 0;
        for _ in 0..2000 {
            acc = dp.mac(acc, 127, 127);
        }
        assert_eq!(acc, FixedFormat::SCORE.max_raw());
    }

    #[test]
    fn fixed_merge_weights_add() {
        let dp = FixedDatapath::with_defaults();
        let mut run = vec![dp.load(1.0) << 7];
        let mut w = 4096;
        dp.merge(&mut run, &mut w, &[0], 4096);
        assert_eq!(w, 8192);
        assert_eq!(dp.out_to_f64(run[0]), 0.5);
    }

    #[test]
    fn float_merge_is_renormalizing() {
        let dp = FloatDatapath::<f64>::new();
        let mut run = vec![1.0, 3.0];
        let mut w = 1.0;
        dp.merge(&mut run, &mut w, &[3.0, 0.0], 3.0);
        assert_eq!(w, 4.0);
        assert_eq!(run, vec![2.5, 0.75]);
    }
}
