//! Subcommand implementations. Each returns the report it printed and
//! writes the same content, plus any tensors, under the output directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sparse_accel::config::{NumberMode, RunConfig, Workload};
use sparse_accel::perf::{self, PerfReport};
use sparse_accel::reference::{masked_attention, max_abs_diff, max_rel_diff};
use sparse_accel::scheduler::{global_capacity, schedule, validate};
use sparse_accel::{
    ArrayConfig, Error, FloatDatapath, Result, SimResult, Simulator, Tensor, TileSchedule,
};

use crate::args::{CompareArgs, RunArgs};

/// Resolved inputs of one run.
struct Run {
    config: RunConfig,
    workload: Workload,
    array: ArrayConfig,
}

impl Run {
    fn new(args: &RunArgs) -> Result<Self> {
        let config = args.run_config()?;
        let mut workload = config.workload()?;
        if config.pattern.is_none() {
            let (globals, boundary) = args.preset_overrides();
            if let Some(b) = boundary {
                workload.pattern = workload.pattern.with_boundary(b)?;
            }
            workload.pattern = workload.pattern.with_globals(globals)?;
        }
        let array = config.array_config(workload.head_dim)?;
        Ok(Run {
            config,
            workload,
            array,
        })
    }

    fn inputs(&self) -> Result<[Tensor; 3]> {
        self.config
            .inputs(self.workload.pattern.seq_len(), self.workload.head_dim)
    }

    fn schedule(&self) -> Result<TileSchedule> {
        let s = schedule(&self.workload.pattern, &self.array)?;
        let report = validate(&s, &self.workload.pattern);
        if !report.is_ok() {
            return Err(Error::InvalidPattern(format!(
                "schedule failed validation: {:?}",
                report.errors
            )));
        }
        Ok(s)
    }

    fn simulate(&self, s: &TileSchedule, [q, k, v]: &[Tensor; 3]) -> Result<SimResult> {
        let sim = self.config.sim;
        match self.config.numerics.mode {
            NumberMode::Float => {
                Simulator::new(self.array, sim, FloatDatapath::<f64>::new())?.run(s, q, k, v)
            }
            NumberMode::Fixed => {
                Simulator::new(self.array, sim, self.config.fixed_datapath()?)?.run(s, q, k, v)
            }
        }
    }

    fn oracle(&self, [q, k, v]: &[Tensor; 3]) -> Result<Tensor> {
        masked_attention(q, k, v, &self.workload.pattern, self.config.sim.scale)
    }

    fn header(&self) -> String {
        let p = &self.workload.pattern;
        format!(
            "workload = {}\npattern = {}\nhead_dim = {}\narray = {}x{}\n",
            self.workload.name, p, self.workload.head_dim, self.array.rows, self.array.cols
        )
    }

    /// Resolved configuration, so every output directory is reproducible.
    fn save_config(&self, out: &Path) -> Result<()> {
        write(out, "config.toml", &self.config.to_toml_string())
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let io = |e: std::io::Error| Error::InvalidConfig(format!("{}: {e}", dir.join(name).display()));
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join(name), text).map_err(io)
}

pub fn stats(args: &RunArgs) -> Result<String> {
    let run = Run::new(args)?;
    let p = &run.workload.pattern;
    let st = p.stats();
    let mut s = run.header();
    let _ = writeln!(s, "seq_len = {}", p.seq_len());
    let _ = writeln!(s, "window_size = {}", p.window_size());
    let _ = writeln!(s, "globals = {:?}", p.globals());
    let _ = writeln!(s, "computed_pairs = {}", st.computed_pairs);
    let _ = writeln!(s, "density = {:.6}", st.density);
    let _ = writeln!(
        s,
        "global_capacity = {}",
        global_capacity(p.seq_len(), p.window_size(), &run.array)
    );
    write(&args.out, "stats.txt", &s)?;
    if p.seq_len() <= 64 {
        write(&args.out, "raster.txt", &p.raster())?;
    }
    run.save_config(&args.out)?;
    Ok(s)
}

pub fn schedule_cmd(args: &RunArgs) -> Result<String> {
    let run = Run::new(args)?;
    let s = run.schedule()?;
    let chunks: BTreeSet<&Vec<usize>> = s
        .passes
        .iter()
        .filter(|p| p.part_index.is_some())
        .map(|p| &p.query_rows)
        .collect();
    let mut out = run.header();
    let _ = writeln!(out, "chunks = {}", chunks.len());
    let _ = writeln!(out, "fragments = {}", s.fragments);
    let _ = writeln!(out, "passes = {}", s.passes.len());
    let _ = writeln!(out, "window_passes = {}", s.window_passes());
    let _ = writeln!(out, "dedicated_passes = {}", s.dedicated_passes());
    let _ = writeln!(out, "over_capacity = {}", s.over_capacity);
    write(&args.out, "schedule.txt", &s.dump())?;
    write(&args.out, "schedule_summary.txt", &out)?;
    run.save_config(&args.out)?;
    Ok(out)
}

pub fn oracle(args: &RunArgs) -> Result<String> {
    let run = Run::new(args)?;
    let inputs = run.inputs()?;
    let o = run.oracle(&inputs)?;
    let mut s = run.header();
    let _ = writeln!(s, "seed = {}", run.config.inputs.seed);
    let _ = writeln!(s, "scale = {}", run.config.sim.scale);
    let _ = writeln!(s, "outputs = oracle_outputs.txt");
    write(&args.out, "oracle_outputs.txt", &o.to_text())?;
    write(&args.out, "oracle.txt", &s)?;
    run.save_config(&args.out)?;
    Ok(s)
}

pub fn simulate(args: &RunArgs) -> Result<String> {
    let run = Run::new(args)?;
    let s = run.schedule()?;
    let r = run.simulate(&s, &run.inputs()?)?;
    let report = PerfReport::from_result(&run.workload.name, &r, &run.workload.pattern);
    let mut out = run.header();
    out.push_str(&r.to_text(false));
    let _ = writeln!(
        out,
        "utilization = {:.6}",
        perf::utilization(&r, run.config.report.include_overhead)
    );
    write(&args.out, "sim.txt", &out)?;
    write(&args.out, "sim_outputs.txt", &r.outputs.to_text())?;
    write(&args.out, "perf.txt", &report.to_kv())?;
    write(&args.out, "perf.csv", &perf::to_csv(&[report]))?;
    run.save_config(&args.out)?;
    Ok(out)
}

/// Report text and whether the diff is within the mode's tolerance.
pub fn verify(args: &RunArgs) -> Result<(String, bool)> {
    let run = Run::new(args)?;
    let s = run.schedule()?;
    let inputs = run.inputs()?;
    let r = run.simulate(&s, &inputs)?;
    let want = run.oracle(&inputs)?;
    let rel = max_rel_diff(&r.outputs, &want);
    let abs = max_abs_diff(&r.outputs, &want);
    let mode = run.config.numerics.mode;
    let tol = mode.tolerance();
    let ok = rel <= tol;
    let mut out = run.header();
    let _ = writeln!(out, "mode = {mode}");
    let _ = writeln!(out, "max_rel_diff = {rel:.6e}");
    let _ = writeln!(out, "max_abs_diff = {abs:.6e}");
    let _ = writeln!(out, "tolerance = {tol:e}");
    let _ = writeln!(out, "status = {}", if ok { "pass" } else { "fail" });
    write(&args.out, "verify.txt", &out)?;
    write(&args.out, "sim_outputs.txt", &r.outputs.to_text())?;
    write(&args.out, "oracle_outputs.txt", &want.to_text())?;
    run.save_config(&args.out)?;
    Ok((out, ok))
}

pub fn compare(args: &CompareArgs) -> Result<String> {
    let mut reports = Vec::new();
    for text in &args.arrays {
        let mut run_args = args.run.clone();
        run_args.array = Some(text.clone());
        let run = Run::new(&run_args)?;
        let s = run.schedule()?;
        let ledger = perf::estimate_ledger(&s, &run.array, &run.config.sim)?;
        let label = format!(
            "{}@{}x{}",
            run.workload.name, run.array.rows, run.array.cols
        );
        reports.push(PerfReport::from_ledger(
            &label,
            &ledger,
            &run.workload.pattern,
        ));
    }
    let baseline = reports[0].workload.clone();
    let rows = perf::compare(&reports, &baseline)?;
    let mut out = perf::to_table(&reports);
    out.push('\n');
    out.push_str(&perf::comparison_table(&rows));
    write(&args.run.out, "compare.txt", &out)?;
    write(&args.run.out, "compare.csv", &perf::to_csv(&reports))?;
    Ok(out)
}
