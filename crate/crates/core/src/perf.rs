//! Utilization, reuse and cycle comparisons derived from cycle ledgers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::Pattern;
use crate::scheduler::{ArrayConfig, TileSchedule};
use crate::simulator::{
    overlap_saving, pass_stage_cycles, stream_reuse_audit, CycleLedger, SimConfig, SimResult,
};

/// Headline metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub workload: String,
    pub passes: u64,
    pub total_cycles: u64,
    /// Total with inter-pass overlap applied (equal to `total_cycles` when off).
    pub overlapped_cycles: u64,
    /// Useful MACs over MAC-stage PE slots.
    pub utilization: f64,
    /// Useful MACs over every PE-cycle.
    pub utilization_with_overhead: f64,
    pub reuse_factor: f64,
    pub density: f64,
    pub computed_pairs: u64,
    pub macs: u64,
}

impl PerfReport {
    pub fn from_ledger(workload: &str, ledger: &CycleLedger, pattern: &Pattern) -> Self {
        let stats = pattern.stats();
        PerfReport {
            workload: workload.to_string(),
            passes: ledger.passes,
            total_cycles: ledger.total_cycles,
            overlapped_cycles: ledger.overlapped_cycles(),
            utilization: ledger.mac_utilization(),
            utilization_with_overhead: ledger.overall_utilization(),
            reuse_factor: ledger.reuse_factor(),
            density: stats.density,
            computed_pairs: stats.computed_pairs,
            macs: ledger.useful_macs,
        }
    }

    pub fn from_result(workload: &str, result: &SimResult, pattern: &Pattern) -> Self {
        Self::from_ledger(workload, &result.ledger, pattern)
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "workload = {}", self.workload);
        let _ = writeln!(s, "passes = {}", self.passes);
        let _ = writeln!(s, "total_cycles = {}", self.total_cycles);
        let _ = writeln!(s, "overlapped_cycles = {}", self.overlapped_cycles);
        let _ = writeln!(s, "utilization = {:.6}", self.utilization);
        let _ = writeln!(
            s,
            "utilization_with_overhead = {:.6}",
            self.utilization_with_overhead
        );
        let _ = writeln!(s, "reuse_factor = {:.6}", self.reuse_factor);
        let _ = writeln!(s, "density = {:.6}", self.density);
        let _ = writeln!(s, "computed_pairs = {}", self.computed_pairs);
        let _ = writeln!(s, "macs = {}", self.macs);
        s
    }
}

/// Useful MACs over MAC-stage PE slots, or over all PE-cycles with
/// `include_overhead`.
pub fn utilization(result: &SimResult, include_overhead: bool) -> f64 {
    if include_overhead {
        result.ledger.overall_utilization()
    } else {
        result.ledger.mac_utilization()
    }
}

/// Ledger of `schedule` from the closed-form timing model and the static
/// reuse audit, without executing any arithmetic.
pub fn estimate_ledger(
    schedule: &TileSchedule,
    array: &ArrayConfig,
    sim: &SimConfig,
) -> Result<CycleLedger> {
    let audit = stream_reuse_audit(schedule, array)?;
    let stage = pass_stage_cycles(array, sim);
    let passes = schedule.passes.len() as u64;
    let cells: u64 = schedule
        .passes
        .iter()
        .map(|p| (p.window_cells() + p.global_cells()) as u64)
        .sum();
    Ok(CycleLedger {
        pe_count: array.pe_count() as u64,
        head_dim: array.head_dim as u64,
        passes,
        stage_cycles: stage.map(|c| c * passes),
        total_cycles: stage.iter().sum::<u64>() * passes,
        overlap_saved: if sim.overlap {
            passes.saturating_sub(1) * overlap_saving(array, sim)
        } else {
            0
        },
        useful_macs: 2 * array.head_dim as u64 * cells,
        kv_loads: 2 * audit.loads(),
        kv_uses: 2 * audit.uses,
        extra_kv_loads: 2 * audit.extra_loads,
        global_operand_loads: 2 * audit.global_operand_loads,
    })
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub workload: String,
    pub total_cycles: u64,
    /// `cycles / baseline cycles`.
    pub cycle_ratio: f64,
    /// `baseline cycles / cycles`.
    pub speedup: f64,
    pub utilization: f64,
}

/// Cycle ratios of every report against the one named `baseline`.
pub fn compare(reports: &[PerfReport], baseline: &str) -> Result<Vec<Comparison>> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot compare an empty list of reports".into(),
        ));
    }
    let base = reports
        .iter()
        .find(|r| r.workload == baseline)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("baseline `{baseline}` not among the reports"))
        })?;
    let b = base.total_cycles as f64;
    Ok(reports
        .iter()
        .map(|r| Comparison {
            workload: r.workload.clone(),
            total_cycles: r.total_cycles,
            cycle_ratio: r.total_cycles as f64 / b,
            speedup: b / r.total_cycles as f64,
            utilization: r.utilization,
        })
        .collect())
}

/// Fixed-width plain-text table of reports.
pub fn to_table(reports: &[PerfReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.workload.len())
        .max()
        .unwrap_or(8)
        .max(8);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>12}  {:>8}  {:>8}  {:>8}  {:>8}",
        "workload", "passes", "cycles", "util", "util+oh", "reuse", "density"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>12}  {:>8.4}  {:>8.4}  {:>8.3}  {:>8.5}",
            r.workload,
            r.passes,
            r.total_cycles,
            r.utilization,
            r.utilization_with_overhead,
            r.reuse_factor,
            r.density
        );
    }
    s
}

/// Plain-text table of a comparison.
pub fn comparison_table(rows: &[Comparison]) -> String {
    let width = rows
        .iter()
        .map(|r| r.workload.len())
        .max()
        .unwrap_or(8)
        .max(8);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>12}  {:>10}  {:>10}  {:>8}",
        "workload", "cycles", "ratio", "speedup", "util"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>10.4}  {:>10.4}  {:>8.4}",
            r.workload, r.total_cycles, r.cycle_ratio, r.speedup, r.utilization
        );
    }
    s
}

/// CSV with a header row.
pub fn to_csv(reports: &[PerfReport]) -> String {
    let mut s = String::from(
        "workload,passes,total_cycles,overlapped_cycles,utilization,utilization_with_overhead,reuse_factor,density,computed_pairs,macs\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.workload,
            r.passes,
            r.total_cycles,
            r.overlapped_cycles,
            r.utilization,
            r.utilization_with_overhead,
            r.reuse_factor,
            r.density,
            r.computed_pairs,
            r.macs
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::{Boundary, WindowSpec};
    use crate::scheduler::schedule;

    fn report(p: &Pattern, cfg: &ArrayConfig, name: &str) -> PerfReport {
        let s = schedule(p, cfg).unwrap();
        let l = estimate_ledger(&s, cfg, &SimConfig::default()).unwrap();
        PerfReport::from_ledger(name, &l, p)
    }

    #[test]
    fn exact_fit_uses_every_mac_slot() {
        // 32 queries, 32-wide wrapped window, no global PEs: one full pass
        let p = Pattern::new(
            32,
            vec![WindowSpec::sliding(-31, 0).unwrap()],
            Boundary::Wrap,
        )
        .unwrap();
        let cfg = ArrayConfig::new(32, 32, 64).unwrap().without_globals();
        let r = report(&p, &cfg, "fit");
        assert_eq!(r.passes, 1);
        assert_eq!(r.utilization, 1.0);
        assert!(r.utilization_with_overhead < 1.0);
    }

    #[test]
    fn nearly_empty_chunk_halves_utilization() {
        let cfg = ArrayConfig::new(32, 32, 64).unwrap().without_globals();
        let p = Pattern::new(
            33,
            vec![WindowSpec::sliding(-31, 0).unwrap()],
            Boundary::Wrap,
        )
        .unwrap();
        let r = report(&p, &cfg, "n33");
        assert_eq!(r.passes, 2);
        assert!((r.utilization - 33.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_lowers_utilization() {
        let cfg = ArrayConfig::new(8, 8, 16).unwrap().without_globals();
        let wrap = Pattern::new(
            64,
            vec![WindowSpec::sliding(-7, 0).unwrap()],
            Boundary::Wrap,
        )
        .unwrap();
        let clip = wrap.clone().with_boundary(Boundary::Clip).unwrap();
        let (a, b) = (report(&wrap, &cfg, "wrap"), report(&clip, &cfg, "clip"));
        assert!(b.utilization < a.utilization);
        assert!(a.utilization <= 1.0);
    }

    #[test]
    fn compare_identical_reports_gives_unit_ratios() {
        let p = Pattern::sliding(64, -4, 4).unwrap();
        let cfg = ArrayConfig::new(8, 8, 16).unwrap().without_globals();
        let r = report(&p, &cfg, "a");
        let mut r2 = r.clone();
        r2.workload = "b".into();
        let rows = compare(&[r, r2], "a").unwrap();
        assert!(rows
            .iter()
            .all(|c| c.cycle_ratio == 1.0 && c.speedup == 1.0));
    }

    #[test]
    fn compare_rejects_empty_and_unknown_baseline() {
        assert!(compare(&[], "x").is_err());
        let p = Pattern::sliding(8, 0, 0).unwrap();
        let cfg = ArrayConfig::new(8, 8, 4).unwrap().without_globals();
        assert!(compare(&[report(&p, &cfg, "a")], "b").is_err());
    }

    #[test]
    fn smaller_array_costs_about_four_times_the_cycles() {
        let p = Pattern::new(256, vec![WindowSpec::centered(32).unwrap()], Boundary::Wrap).unwrap();
        let small = ArrayConfig::new(8, 8, 256).unwrap().without_globals();
        let big = ArrayConfig::new(16, 16, 256).unwrap().without_globals();
        let rows = compare(
            &[report(&p, &small, "8x8"), report(&p, &big, "16x16")],
            "16x16",
        )
        .unwrap();
        let ratio = rows[0].cycle_ratio;
        // 4x the passes, each pass 543 vs 567 cycles
        assert_eq!(ratio, 4.0 * 543.0 / 567.0);
        assert!((ratio - 4.0).abs() / 4.0 < 0.1);
    }

    #[test]
    fn dense_over_sparse_cycle_ratio_is_inverse_density() {
        let cfg = ArrayConfig::new(8, 8, 16).unwrap().without_globals();
        let sparse =
            Pattern::new(256, vec![WindowSpec::centered(32).unwrap()], Boundary::Wrap).unwrap();
        let dense = Pattern::new(
            256,
            vec![WindowSpec::centered(256).unwrap()],
            Boundary::Wrap,
        )
        .unwrap();
        let (s, d) = (
            report(&sparse, &cfg, "sparse"),
            report(&dense, &cfg, "dense"),
        );
        assert_eq!(d.density, 1.0);
        let rows = compare(&[s.clone(), d], "sparse").unwrap();
        assert_eq!(rows[1].cycle_ratio, 1.0 / s.density);
    }

    #[test]
    fn csv_and_kv_have_one_record_each() {
        let p = Pattern::sliding(16, -2, 2).unwrap();
        let cfg = ArrayConfig::new(4, 4, 4).unwrap().without_globals();
        let r = report(&p, &cfg, "w");
        assert_eq!(to_csv(std::slice::from_ref(&r)).lines().count(), 2);
        assert!(r.to_kv().contains("passes = "));
        assert_eq!(to_table(&[r]).lines().count(), 2);
    }
}
