//! Cycle-stepped execution of a [`TileSchedule`] on the PE array.
//!
//! Each pass runs five stages:
//!
//! 1. `S = Q K^T`: queries enter every row at column 0 and shift right one
//!    PE per cycle; keys move down-right along registered diagonals, so a
//!    PE sees element `e` of both operands at cycle `e + c`.
//! 2. `exp`: every active PE applies the exponential to its score.
//! 3. Row sums flow right along the row chain, the reciprocal is computed
//!    at the chain end and broadcast back.
//! 4. Every PE multiplies its exponential by the broadcast inverse.
//! 5. `S' V`: partial sums flow right while values follow the key path;
//!    finished elements leave the chain end and the weighted-sum module
//!    folds them into the per-query running output.

mod datapath;
mod reuse;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reference::FloatTensor;
use crate::scheduler::{ArrayConfig, TilePass, TileSchedule};

pub use datapath::{Datapath, FixedDatapath, FloatDatapath};
pub use reuse::{stream_reuse_audit, KeySource, PassPlan, ReuseReport};

/// Latencies and switches of the timing model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub exp_latency: u64,
    pub recip_latency: u64,
    pub broadcast_latency: u64,
    /// Cycles the weighted-sum module adds after the last stage-5 element.
    pub merge_latency: u64,
    /// Hide the stage-5 drain of a pass behind stage 1 of the next one.
    pub overlap: bool,
    /// Multiply queries by `1/sqrt(head_dim)` before loading them.
    pub scale: bool,
    /// Fail a pass whose operands do not fit the on-chip buffers.
    pub check_buffers: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            exp_latency: 2,
            recip_latency: 4,
            broadcast_latency: 1,
            merge_latency: 1,
            overlap: false,
            scale: true,
            check_buffers: true,
        }
    }
}

/// Closed-form cycles of each stage of one pass. Every pass costs the same.
pub fn pass_stage_cycles(array: &ArrayConfig, sim: &SimConfig) -> [u64; 5] {
    let d = array.head_dim as u64;
    let chain = array.chain_len() as u64;
    [
        d + chain - 1,
        sim.exp_latency,
        chain + sim.recip_latency + sim.broadcast_latency,
        1,
        d + chain - 1 + sim.merge_latency,
    ]
}

/// Cycles saved at each pass boundary when overlap is on: the stage-5 drain
/// after the last element enters column 0.
pub fn overlap_saving(array: &ArrayConfig, sim: &SimConfig) -> u64 {
    pass_stage_cycles(array, sim)[4] - array.head_dim as u64
}

/// Cycle and traffic counters accumulated over passes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleLedger {
    pub pe_count: u64,
    pub head_dim: u64,
    pub passes: u64,
    pub stage_cycles: [u64; 5],
    /// Sum of all stage cycles, passes back to back.
    pub total_cycles: u64,
    /// Cycles hidden by overlapping consecutive passes (0 when off).
    pub overlap_saved: u64,
    /// Multiply-accumulates on scheduled cells in stages 1 and 5.
    pub useful_macs: u64,
    /// K and V vectors read from the buffers (all sources).
    pub kv_loads: u64,
    /// K and V vector uses by PEs.
    pub kv_uses: u64,
    /// Reads of global-row keys that were not streaming in the same pass.
    pub extra_kv_loads: u64,
    /// Reads to latch global K/V into the global column.
    pub global_operand_loads: u64,
}

impl CycleLedger {
    pub fn overlapped_cycles(&self) -> u64 {
        self.total_cycles - self.overlap_saved
    }

    /// Useful MACs over the MAC-stage slots (`pe_count * 2d` per pass).
    pub fn mac_utilization(&self) -> f64 {
        let slots = self.pe_count * 2 * self.head_dim * self.passes;
        if slots == 0 {
            0.0
        } else {
            self.useful_macs as f64 / slots as f64
        }
    }

    /// Useful MACs over every PE-cycle, control and drain included.
    pub fn overall_utilization(&self) -> f64 {
        let cycles = if self.overlap_saved > 0 {
            self.overlapped_cycles()
        } else {
            self.total_cycles
        };
        let slots = self.pe_count * cycles;
        if slots == 0 {
            0.0
        } else {
            self.useful_macs as f64 / slots as f64
        }
    }

    /// PE uses per buffer read of a K or V vector.
    pub fn reuse_factor(&self) -> f64 {
        if self.kv_loads == 0 {
            0.0
        } else {
            self.kv_uses as f64 / self.kv_loads as f64
        }
    }

    fn absorb(&mut self, other: &CycleLedger) {
        self.passes += other.passes;
        for (a, b) in self.stage_cycles.iter_mut().zip(other.stage_cycles) {
            *a += b;
        }
        self.total_cycles += other.total_cycles;
        self.useful_macs += other.useful_macs;
        self.kv_loads += other.kv_loads;
        self.kv_uses += other.kv_uses;
        self.extra_kv_loads += other.extra_kv_loads;
        self.global_operand_loads += other.global_operand_loads;
    }
}

/// Output of one query row in one pass.
#[derive(Clone, Debug)]
pub struct RowPartial<D: Datapath> {
    /// Query index in schedule (reordered) space.
    pub query: usize,
    pub vector: Vec<D::Out>,
    pub weight: D::Sum,
}

/// Everything one pass produces.
#[derive(Clone, Debug)]
pub struct PassOutput<D: Datapath> {
    pub partials: Vec<RowPartial<D>>,
    pub ledger: CycleLedger,
}

/// Operands already permuted into schedule order and converted by the
/// datapath, flat row-major `n x d`.
#[derive(Clone, Debug)]
pub struct Operands<E> {
    pub n: usize,
    pub d: usize,
    pub q: Vec<E>,
    pub k: Vec<E>,
    pub v: Vec<E>,
}

/// Final merged result of a run, in original query order.
#[derive(Clone, Debug)]
pub struct SimResult {
    pub mode: String,
    pub outputs: FloatTensor<f64>,
    /// Merged softmax denominators per query.
    pub weights: Vec<f64>,
    pub ledger: CycleLedger,
    pub pass_cycles: [u64; 5],
}

impl SimResult {
    /// `key = value` summary, optionally followed by the output tensor.
    pub fn to_text(&self, with_outputs: bool) -> String {
        let l = &self.ledger;
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "passes = {}", l.passes);
        for (i, c) in self.pass_cycles.iter().enumerate() {
            let _ = writeln!(s, "pass_cycles.stage{} = {}", i + 1, c);
        }
        for (i, c) in l.stage_cycles.iter().enumerate() {
            let _ = writeln!(s, "cycles.stage{} = {}", i + 1, c);
        }
        let _ = writeln!(s, "cycles.total = {}", l.total_cycles);
        let _ = writeln!(s, "cycles.overlapped = {}", l.overlapped_cycles());
        let _ = writeln!(s, "macs.useful = {}", l.useful_macs);
        let _ = writeln!(s, "utilization.mac = {:.6}", l.mac_utilization());
        let _ = writeln!(s, "utilization.overall = {:.6}", l.overall_utilization());
        let _ = writeln!(s, "kv.loads = {}", l.kv_loads);
        let _ = writeln!(s, "kv.uses = {}", l.kv_uses);
        let _ = writeln!(s, "kv.extra_loads = {}", l.extra_kv_loads);
        let _ = writeln!(s, "kv.global_operand_loads = {}", l.global_operand_loads);
        let _ = writeln!(s, "kv.reuse_factor = {:.6}", l.reuse_factor());
        if with_outputs {
            s.push_str("[outputs]\n");
            s.push_str(&self.outputs.to_text());
        }
        s
    }
}

/// Running state of the weighted-sum module for one query.
struct RowMergeState<D: Datapath> {
    vector: Vec<D::Out>,
    weight: D::Sum,
    fragments: usize,
}

/// PE array plus weighted-sum module over datapath `D`.
#[derive(Clone, Debug)]
pub struct Simulator<D> {
    array: ArrayConfig,
    config: SimConfig,
    datapath: D,
}

impl<D: Datapath> Simulator<D> {
    pub fn new(array: ArrayConfig, config: SimConfig, datapath: D) -> Result<Self> {
        array.validate()?;
        Ok(Simulator {
            array,
            config,
            datapath,
        })
    }

    pub fn array(&self) -> &ArrayConfig {
        &self.array
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn datapath(&self) -> &D {
        &self.datapath
    }

    /// Permutes inputs into schedule order, scales Q and converts every
    /// element with the datapath.
    pub fn prepare(
        &self,
        perm: &[usize],
        q: &FloatTensor<f64>,
        k: &FloatTensor<f64>,
        v: &FloatTensor<f64>,
    ) -> Result<Operands<D::Elem>> {
        let (n, d) = (q.rows(), self.array.head_dim);
        for (name, t) in [("Q", q), ("K", k), ("V", v)] {
            if t.rows() != n || t.cols() != d {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {n}x{d}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        if perm.len() != n {
            return Err(Error::Shape(format!(
                "schedule covers {} queries, inputs have {n}",
                perm.len()
            )));
        }
        let scale = if self.config.scale {
            1.0 / (d as f64).sqrt()
        } else {
            1.0
        };
        let convert = |t: &FloatTensor<f64>, s: f64| -> Vec<D::Elem> {
            perm.iter()
                .flat_map(|&i| t.row(i).iter().map(move |&x| self.datapath.load(x * s)))
                .collect()
        };
        Ok(Operands {
            n,
            d,
            q: convert(q, scale),
            k: convert(k, 1.0),
            v: convert(v, 1.0),
        })
    }

    fn check_buffers(&self, index: usize, pass: &TilePass) -> Result<()> {
        let b = &self.array.buffers;
        let d = self.array.head_dim;
        let global_row = usize::from(pass.global_row.is_some());
        let queries = pass.query_rows.len() + global_row;
        let mut keys = pass.streamed_keys();
        if let Some(g) = &pass.global_row {
            keys.extend(g.keys.iter().copied());
        }
        if let Some(g) = &pass.global_col {
            keys.insert(g.token);
        }
        let checks = [
            ("query", queries * d, b.query_bytes),
            ("key", keys.len() * d, b.key_bytes),
            ("value", keys.len() * d, b.value_bytes),
            ("output", queries * d * 2, b.output_bytes),
        ];
        for (buffer, needed, capacity) in checks {
            if needed > capacity {
                return Err(Error::BufferOverflow {
                    pass: index,
                    buffer,
                    needed,
                    capacity,
                });
            }
        }
        Ok(())
    }

    /// Executes one pass cycle by cycle. `latched` is the token currently
    /// held by the global column, carried across passes.
    #[allow(clippy::needless_range_loop)] // PE grids read best indexed
    pub fn run_pass(
        &self,
        index: usize,
        pass: &TilePass,
        ops: &Operands<D::Elem>,
        latched: &mut Option<usize>,
    ) -> Result<PassOutput<D>> {
        if self.config.check_buffers {
            self.check_buffers(index, pass)?;
        }
        let plan = PassPlan::new(pass, &self.array)?;
        for &i in plan.query.iter().flatten().chain(plan.key.iter().flatten()) {
            if i >= ops.n {
                return Err(Error::Shape(format!(
                    "pass {index} references token {i} of {}",
                    ops.n
                )));
            }
        }
        let dp = &self.datapath;
        let d = ops.d;
        let (rows, cols) = (plan.grid_rows, plan.grid_cols);
        let pes = rows * cols;
        let stage = pass_stage_cycles(&self.array, &self.config);
        let mut ledger = CycleLedger {
            pe_count: self.array.pe_count() as u64,
            head_dim: d as u64,
            passes: 1,
            stage_cycles: stage,
            total_cycles: stage.iter().sum(),
            ..CycleLedger::default()
        };

        let latch_loads = reuse::latch_cost(latched, &plan, pass);
        let extra = plan.count(KeySource::Extra) as u64;
        ledger.global_operand_loads = 2 * latch_loads;
        ledger.extra_kv_loads = 2 * extra;
        ledger.kv_uses = 2 * plan.cells() as u64;

        // stage 1: Q K^T on registered operands
        let mut acc = vec![D::Acc::default(); pes];
        let mut injections = 0u64;
        {
            let mut q_reg: Vec<Option<(usize, D::Elem)>> = vec![None; pes];
            let mut k_reg: Vec<Option<(usize, D::Elem)>> = vec![None; pes];
            let mut q_next = q_reg.clone();
            let mut k_next = k_reg.clone();
            for t in 0..stage[0] as usize {
                for r in 0..rows {
                    let Some(qi) = plan.query[r] else { continue };
                    for c in 0..cols {
                        let idx = r * cols + c;
                        q_next[idx] = if c == 0 {
                            (t < d).then(|| (t, ops.q[qi * d + t]))
                        } else {
                            q_reg[idx - 1]
                        };
                        let Some(kj) = plan.key[idx] else {
                            k_next[idx] = None;
                            continue;
                        };
                        let e = t.checked_sub(c).filter(|&e| e < d);
                        k_next[idx] = match plan.source[idx] {
                            KeySource::Diagonal => k_reg[idx - cols - 1],
                            KeySource::Inject => {
                                if e == Some(0) {
                                    injections += 1;
                                }
                                e.map(|e| (e, ops.k[kj * d + e]))
                            }
                            _ => e.map(|e| (e, ops.k[kj * d + e])),
                        };
                        if let (Some((qe, qv)), Some((ke, kv))) = (q_next[idx], k_next[idx]) {
                            debug_assert_eq!(qe, ke, "operand skew at PE ({r},{c}) cycle {t}");
                            acc[idx] = dp.mac(acc[idx], qv, kv);
                            ledger.useful_macs += 1;
                        }
                    }
                }
                std::mem::swap(&mut q_reg, &mut q_next);
                std::mem::swap(&mut k_reg, &mut k_next);
            }
        }

        // stage 2: exponential
        for idx in 0..pes {
            if plan.key[idx].is_some() {
                acc[idx] = dp.exp(acc[idx]);
            }
        }

        // stage 3: row sums and broadcast inverse
        let mut sums = vec![D::Sum::default(); rows];
        let mut inv = vec![D::Acc::default(); rows];
        let mut active = vec![false; rows];
        for r in 0..rows {
            for c in 0..cols {
                let idx = r * cols + c;
                if plan.key[idx].is_some() {
                    sums[r] = dp.add(sums[r], acc[idx]);
                    active[r] = true;
                }
            }
            if active[r] {
                inv[r] = dp.reciprocal(sums[r]);
            }
        }

        // stage 4: normalize
        for r in 0..rows {
            for c in 0..cols {
                let idx = r * cols + c;
                if plan.key[idx].is_some() {
                    acc[idx] = dp.normalize(acc[idx], inv[r]);
                }
            }
        }

        // stage 5: S' V, partial sums flow right
        let mut out: Vec<Vec<D::Out>> = vec![vec![D::Out::default(); d]; rows];
        {
            let mut v_reg: Vec<Option<(usize, D::Elem)>> = vec![None; pes];
            let mut p_reg: Vec<Option<(usize, D::Psum)>> = vec![None; pes];
            let mut v_next = v_reg.clone();
            let mut p_next = p_reg.clone();
            for t in 0..(d + cols - 1) {
                for r in 0..rows {
                    if !active[r] {
                        continue;
                    }
                    for c in 0..cols {
                        let idx = r * cols + c;
                        let e = t.checked_sub(c).filter(|&e| e < d);
                        v_next[idx] = match (plan.key[idx], plan.source[idx]) {
                            (None, _) => None,
                            (Some(_), KeySource::Diagonal) => v_reg[idx - cols - 1],
                            (Some(kj), _) => e.map(|e| (e, ops.v[kj * d + e])),
                        };
                        let Some(e) = e else {
                            p_next[idx] = None;
                            continue;
                        };
                        let incoming = if c == 0 {
                            D::Psum::default()
                        } else {
                            let (pe_, ps) = p_reg[idx - 1].expect("partial sum present");
                            debug_assert_eq!(pe_, e);
                            ps
                        };
                        let psum = match v_next[idx] {
                            Some((ve, vv)) => {
                                debug_assert_eq!(ve, e, "value skew at PE ({r},{c}) cycle {t}");
                                ledger.useful_macs += 1;
                                dp.weighted_mac(incoming, acc[idx], vv)
                            }
                            None => incoming,
                        };
                        p_next[idx] = Some((e, psum));
                        if c == cols - 1 {
                            out[r][e] = dp.emit(psum);
                        }
                    }
                }
                std::mem::swap(&mut v_reg, &mut v_next);
                std::mem::swap(&mut p_reg, &mut p_next);
            }
        }
        // K and V chains are injected at the same PEs
        ledger.kv_loads = 2 * (injections + extra + latch_loads);

        let partials = (0..rows)
            .filter(|&r| active[r])
            .map(|r| RowPartial {
                query: plan.query[r].expect("active row has a query"),
                vector: std::mem::take(&mut out[r]),
                weight: sums[r],
            })
            .collect();
        Ok(PassOutput { partials, ledger })
    }

    /// Runs every pass of `schedule` and merges per-query partials.
    pub fn run(
        &self,
        schedule: &TileSchedule,
        q: &FloatTensor<f64>,
        k: &FloatTensor<f64>,
        v: &FloatTensor<f64>,
    ) -> Result<SimResult> {
        let ops = self.prepare(&schedule.q_perm, q, k, v)?;
        let (n, d) = (ops.n, ops.d);
        let dp = &self.datapath;
        let mut ledger = CycleLedger {
            pe_count: self.array.pe_count() as u64,
            head_dim: d as u64,
            ..CycleLedger::default()
        };
        let mut states: Vec<Option<RowMergeState<D>>> = (0..n).map(|_| None).collect();
        let mut latched = None;
        for (index, pass) in schedule.passes.iter().enumerate() {
            let po = self.run_pass(index, pass, &ops, &mut latched)?;
            ledger.absorb(&po.ledger);
            for part in po.partials {
                match &mut states[part.query] {
                    Some(st) => {
                        dp.merge(&mut st.vector, &mut st.weight, &part.vector, part.weight);
                        st.fragments += 1;
                    }
                    slot @ None => {
                        *slot = Some(RowMergeState {
                            vector: part.vector,
                            weight: part.weight,
                            fragments: 1,
                        })
                    }
                }
            }
        }
        if self.config.overlap && ledger.passes > 1 {
            ledger.overlap_saved = (ledger.passes - 1) * overlap_saving(&self.array, &self.config);
        }

        let mut outputs = FloatTensor::zeros(n, d);
        let mut weights = vec![0.0; n];
        for (a, st) in states.into_iter().enumerate() {
            let i = schedule.q_perm[a];
            let st = st.ok_or(Error::EmptyRow(i))?;
            debug_assert!(st.fragments >= 1);
            for (o, &x) in outputs.row_mut(i).iter_mut().zip(&st.vector) {
                *o = dp.out_to_f64(x);
            }
            weights[i] = dp.sum_to_f64(st.weight);
        }
        Ok(SimResult {
            mode: dp.name().to_string(),
            outputs,
            weights,
            ledger,
            pass_cycles: pass_stage_cycles(&self.array, &self.config),
        })
    }
}

impl<T> Simulator<FloatDatapath<T>>
where
    FloatDatapath<T>: Datapath,
{
    /// Float simulator with default timing.
    pub fn float(array: ArrayConfig) -> Result<Self> {
        Self::new(array, SimConfig::default(), FloatDatapath::new())
    }
}

impl Simulator<FixedDatapath> {
    /// Fixed-point simulator with the default PWL table and timing.
    pub fn fixed(array: ArrayConfig) -> Result<Self> {
        Self::new(array, SimConfig::default(), FixedDatapath::with_defaults())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::Pattern;
    use crate::reference::{masked_attention, max_rel_diff};
    use crate::scheduler::schedule;

    fn inputs(n: usize, d: usize, seed: u64) -> [FloatTensor<f64>; 3] {
        [
            FloatTensor::random(n, d, seed, 1.0),
            FloatTensor::random(n, d, seed + 1, 1.0),
            FloatTensor::random(n, d, seed + 2, 1.0),
        ]
    }

    #[test]
    fn stage_cycles_match_closed_form() {
        let cfg = ArrayConfig::new(4, 4, 8).unwrap();
        let st = pass_stage_cycles(&cfg, &SimConfig::default());
        assert_eq!(st, [8 + 5 - 1, 2, 5 + 4 + 1, 1, 8 + 5 - 1 + 1]);
        assert_eq!(overlap_saving(&cfg, &SimConfig::default()), 5);
    }

    #[test]
    fn float_run_matches_oracle_on_sliding_window() {
        let p = Pattern::sliding(20, -3, 3).unwrap();
        let cfg = ArrayConfig::new(4, 3, 8).unwrap().without_globals();
        let s = schedule(&p, &cfg).unwrap();
        let [q, k, v] = inputs(20, 8, 7);
        let sim = Simulator::<FloatDatapath<f64>>::float(cfg).unwrap();
        let r = sim.run(&s, &q, &k, &v).unwrap();
        let want = masked_attention(&q, &k, &v, &p, true).unwrap();
        assert!(max_rel_diff(&r.outputs, &want) < 1e-12);
        // stage 1 and stage 5 each do d MACs per cell
        assert_eq!(r.ledger.useful_macs, 2 * 8 * p.stats().computed_pairs);
        assert_eq!(r.ledger.passes, s.passes.len() as u64);
        assert_eq!(
            r.ledger.total_cycles,
            s.passes.len() as u64
                * pass_stage_cycles(&cfg, &SimConfig::default())
                    .iter()
                    .sum::<u64>()
        );
    }

    #[test]
    fn ledger_loads_match_static_audit() {
        let p = Pattern::dilated(48, -6, 6, 2)
            .unwrap()
            .with_globals(vec![0, 5])
            .unwrap();
        let cfg = ArrayConfig::new(8, 4, 4).unwrap();
        let s = schedule(&p, &cfg).unwrap();
        let [q, k, v] = inputs(48, 4, 3);
        let sim = Simulator::<FloatDatapath<f64>>::float(cfg).unwrap();
        let r = sim.run(&s, &q, &k, &v).unwrap();
        let audit = stream_reuse_audit(&s, &cfg).unwrap();
        assert_eq!(r.ledger.kv_loads, 2 * audit.loads());
        assert_eq!(r.ledger.kv_uses, 2 * audit.uses);
        assert_eq!(r.ledger.extra_kv_loads, 2 * audit.extra_loads);
        let want = masked_attention(&q, &k, &v, &p, true).unwrap();
        assert!(max_rel_diff(&r.outputs, &want) < 1e-12);
    }

    #[test]
    fn missing_rows_are_reported() {
        let p = Pattern::sliding(8, 0, 0).unwrap();
        let cfg = ArrayConfig::new(4, 1, 2).unwrap().without_globals();
        let mut s = schedule(&p, &cfg).unwrap();
        s.passes.pop();
        let [q, k, v] = inputs(8, 2, 1);
        let sim = Simulator::<FloatDatapath<f64>>::float(cfg).unwrap();
        assert!(matches!(sim.run(&s, &q, &k, &v), Err(Error::EmptyRow(4))));
    }

    #[test]
    fn buffer_overflow_is_detected() {
        let p = Pattern::sliding(64, -1, 1).unwrap();
        let mut cfg = ArrayConfig::new(8, 3, 16).unwrap().without_globals();
        cfg.buffers.query_bytes = 64;
        let s = schedule(&p, &cfg).unwrap();
        let [q, k, v] = inputs(64, 16, 1);
        let sim = Simulator::<FloatDatapath<f64>>::float(cfg).unwrap();
        assert!(matches!(
            sim.run(&s, &q, &k, &v),
            Err(Error::BufferOverflow {
                buffer: "query",
                ..
            })
        ));
    }

    #[test]
    fn fixed_run_stays_close_to_oracle() {
        let p = Pattern::sliding(32, -4, 4).unwrap();
        let cfg = ArrayConfig::new(8, 8, 16).unwrap().without_globals();
        let s = schedule(&p, &cfg).unwrap();
        let [q, k, v] = inputs(32, 16, 11);
        let sim = Simulator::fixed(cfg).unwrap();
        let r = sim.run(&s, &q, &k, &v).unwrap();
        let want = masked_attention(&q, &k, &v, &p, true).unwrap();
        assert!(max_rel_diff(&r.outputs, &want) < 0.1);
    }

    #[test]
    fn overlap_is_reported_separately() {
        let p = Pattern::sliding(16, -2, 2).unwrap();
        let cfg = ArrayConfig::new(4, 5, 4).unwrap().without_globals();
        let s = schedule(&p, &cfg).unwrap();
        let [q, k, v] = inputs(16, 4, 2);
        let sc = SimConfig {
            overlap: true,
            ..SimConfig::default()
        };
        let sim = Simulator::new(cfg, sc, FloatDatapath::<f64>::new()).unwrap();
        let r = sim.run(&s, &q, &k, &v).unwrap();
        assert_eq!(r.ledger.overlap_saved, 3 * 5);
        assert_eq!(r.ledger.overlapped_cycles(), r.ledger.total_cycles - 15);
    }
}
