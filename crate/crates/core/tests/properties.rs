//! Cross-module invariants checked on random instances.

use proptest::prelude::*;
use proptest::sample::Index;

use sparse_accel::numerics::{build_pwl_table, dequantize, quantize, FixedFormat, Segmentation};
use sparse_accel::reference::{masked_attention, max_abs_diff, max_rel_diff, merge, PartialOutput};
use sparse_accel::scheduler::{schedule, validate};
use sparse_accel::simulator::stream_reuse_audit;
use sparse_accel::{
    ArrayConfig, Boundary, FixedSimulator, GoldenSimulator, Pattern, Tensor, WindowSpec,
};

fn inputs(n: usize, d: usize, seed: u64) -> [Tensor; 3] {
    [
        Tensor::random(n, d, seed, 1.0),
        Tensor::random(n, d, seed + 1, 1.0),
        Tensor::random(n, d, seed + 2, 1.0),
    ]
}

/// One or two window clauses, either boundary, up to two globals, no empty rows.
fn patterns(max_n: usize) -> impl Strategy<Value = Pattern> {
    (
        2..=max_n,
        prop::collection::vec((-8i64..=2, 0i64..=4, 1usize..=4), 1..=2),
        any::<bool>(),
        prop::collection::vec(any::<Index>(), 0..=2),
    )
        .prop_filter_map("valid pattern", |(n, ws, wrap, gs)| {
            let windows = ws
                .into_iter()
                .map(|(lo, span, dil)| {
                    let lo = lo * dil as i64;
                    WindowSpec::new(lo, lo + span * dil as i64, dil)
                })
                .collect::<Result<Vec<_>, _>>()
                .ok()?;
            let boundary = if wrap { Boundary::Wrap } else { Boundary::Clip };
            let p = Pattern::new(n, windows, boundary).ok()?;
            let p = p.with_globals(gs.iter().map(|g| g.index(n))).ok()?;
            (0..n)
                .all(|i| (0..n).any(|j| p.membership(i, j)))
                .then_some(p)
        })
}

fn arrays() -> impl Strategy<Value = ArrayConfig> {
    (1usize..=6, 1usize..=6, 1usize..=6).prop_map(|(r, c, d)| ArrayConfig::new(r, c, d).unwrap())
}

fn part(vector: Vec<f64>, weight: f64) -> PartialOutput<f64> {
    PartialOutput { vector, weight }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn globals_fill_their_row_and_column(p in patterns(40)) {
        for &g in p.globals() {
            for j in 0..p.seq_len() {
                prop_assert!(p.membership(g, j) && p.membership(j, g));
            }
        }
    }

    #[test]
    fn adding_a_global_never_removes_pairs(p in patterns(40), g in any::<Index>()) {
        let before = p.stats().computed_pairs;
        let mut globals = p.globals().to_vec();
        globals.push(g.index(p.seq_len()));
        let q = p.clone().with_globals(globals).unwrap();
        prop_assert!(q.stats().computed_pairs >= before);
    }

    #[test]
    fn interior_rows_translate_by_dilation(n in 30usize..80, lo in -3i64..=0, span in 0i64..=3, dil in 1usize..=3) {
        let lo = lo * dil as i64;
        let p = Pattern::dilated(n, lo, lo + span * dil as i64, dil).unwrap();
        let reach = (lo.unsigned_abs() as usize).max((lo + span * dil as i64).unsigned_abs() as usize);
        for i in reach..n.saturating_sub(reach + dil) {
            let row: Vec<usize> = (0..n).filter(|&j| p.membership(i, j)).collect();
            let next: Vec<usize> = (0..n).filter(|&j| p.membership(i + dil, j)).collect();
            let shifted: Vec<usize> = row.iter().map(|j| j + dil).collect();
            prop_assert_eq!(next, shifted);
        }
    }

    #[test]
    fn stats_equal_brute_force_count(p in patterns(60)) {
        let n = p.seq_len();
        let brute = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| p.membership(i, j)).count();
        prop_assert_eq!(p.stats().computed_pairs as usize, brute);
    }

    #[test]
    fn merge_is_associative_and_commutative(
        vs in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 3), 3),
        ws in prop::collection::vec(0.01f64..50.0, 3),
    ) {
        let [a, b, c] = [0, 1, 2].map(|k| part(vs[k].clone(), ws[k]));
        let left = merge(&[merge(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
        let right = merge(&[a.clone(), merge(&[b.clone(), c.clone()]).unwrap()]).unwrap();
        let swapped = merge(&[c, b, a]).unwrap();
        for other in [&right, &swapped] {
            prop_assert!(((left.weight - other.weight) / left.weight).abs() < 1e-12);
            for (x, y) in left.vector.iter().zip(&other.vector) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn outputs_are_convex_combinations_of_values(p in patterns(32), seed in 0u64..1000) {
        let n = p.seq_len();
        let [q, k, v] = inputs(n, 3, seed);
        let o = masked_attention(&q, &k, &v, &p, true).unwrap();
        for i in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| p.membership(i, j)).collect();
            for t in 0..3 {
                let lo = keys.iter().map(|&j| v.row(j)[t]).fold(f64::INFINITY, f64::min);
                let hi = keys.iter().map(|&j| v.row(j)[t]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o.row(i)[t] >= lo - 1e-12 && o.row(i)[t] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn cyclic_shift_commutes_with_wrapped_attention(n in 8usize..40, w in 1usize..8, shift in 1usize..8, seed in 0u64..1000) {
        let p = Pattern::new(n, vec![WindowSpec::centered(w).unwrap()], Boundary::Wrap).unwrap();
        let [q, k, v] = inputs(n, 4, seed);
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let o = masked_attention(&q, &k, &v, &p, true).unwrap();
        let os = masked_attention(&q.permute_rows(&perm), &k.permute_rows(&perm), &v.permute_rows(&perm), &p, true).unwrap();
        prop_assert!(max_abs_diff(&os, &o.permute_rows(&perm)) < 1e-12);
    }

    #[test]
    fn schedules_cover_the_pattern_exactly(p in patterns(48), cfg in arrays()) {
        let s = schedule(&p, &cfg).unwrap();
        let report = validate(&s, &p);
        prop_assert!(report.is_ok(), "{:?}", report.errors);
        let mut perm = s.q_perm.clone();
        perm.sort_unstable();
        prop_assert!(perm.iter().enumerate().all(|(a, &i)| a == i));
        let slots = cfg.rows * cfg.cols;
        prop_assert!(s.window_passes() * slots >= report.window_cells);
    }

    #[test]
    fn window_passes_only_tap_streamed_keys(p in patterns(48), cfg in arrays()) {
        let s = schedule(&p, &cfg).unwrap();
        for pass in s.passes.iter().filter(|pass| pass.part_index.is_some()) {
            let streamed = pass.streamed_keys();
            if let Some(g) = &pass.global_row {
                prop_assert!(g.keys.iter().all(|k| streamed.contains(k)));
            }
            if let Some(g) = &pass.global_col {
                prop_assert!(g.rows.iter().all(|&r| r < pass.query_rows.len()));
            }
        }
        let audit = stream_reuse_audit(&s, &cfg).unwrap();
        if s.dedicated_passes() == 0 {
            prop_assert_eq!(audit.extra_loads, 0);
        }
    }

    #[test]
    fn pass_order_does_not_change_outputs(p in patterns(40), cfg in arrays(), seed in 0u64..1000) {
        let mut s = schedule(&p, &cfg).unwrap();
        let [q, k, v] = inputs(p.seq_len(), cfg.head_dim, seed);
        let sim = GoldenSimulator::float(cfg).unwrap();
        let forward = sim.run(&s, &q, &k, &v).unwrap();
        s.passes.reverse();
        let backward = sim.run(&s, &q, &k, &v).unwrap();
        prop_assert!(max_rel_diff(&backward.outputs, &forward.outputs) <= 1e-9);
        prop_assert_eq!(backward.ledger.useful_macs, forward.ledger.useful_macs);
        prop_assert_eq!(forward.ledger.useful_macs, 2 * cfg.head_dim as u64 * p.stats().computed_pairs);
    }

    #[test]
    fn fixed_outputs_are_finite_and_bounded(p in patterns(40), cfg in arrays(), seed in 0u64..1000) {
        let s = schedule(&p, &cfg).unwrap();
        let [q, k, v] = inputs(p.seq_len(), cfg.head_dim, seed);
        let r = FixedSimulator::fixed(cfg).unwrap().run(&s, &q, &k, &v).unwrap();
        let bound = FixedFormat::OUTPUT.max_value();
        prop_assert!(r.outputs.as_slice().iter().all(|x| x.is_finite() && x.abs() <= bound + FixedFormat::OUTPUT.lsb()));
        prop_assert!(r.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn quantize_round_trip_is_within_half_an_lsb(x in -7.9f64..7.9) {
        let f = FixedFormat::INPUT;
        let err = (dequantize(quantize(x, f)) - x).abs();
        prop_assert!(err <= 0.5f64.powi(f.frac_bits as i32 + 1) + 1e-15);
    }

    #[test]
    fn pwl_tables_are_positive_and_monotone(segments in 1usize..48, lo in -12.0f64..-1.0, width in 1.0f64..12.0, equal in any::<bool>()) {
        let seg = if equal { Segmentation::EqualError } else { Segmentation::Uniform };
        let t = build_pwl_table(segments, lo, lo + width, seg).unwrap();
        let mut prev = 0.0;
        for k in 0..=400 {
            let x = lo + width * k as f64 / 400.0;
            let y = t.eval(x);
            prop_assert!(y > 0.0);
            prop_assert!(y >= prev - 1e-12, "step down at x = {}", x);
            prop_assert!((y - x.exp()).abs() <= t.max_abs_err() + 1e-9);
            prev = y;
        }
    }
}

/// Splits the fixture into its four tensors.
fn fixture_tensors() -> Vec<Tensor> {
    let text = include_str!("fixtures/attention_n8_w3.txt");
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    lines
        .chunks(9)
        .map(|c| Tensor::from_text(&c.join("\n")).unwrap())
        .collect()
}

#[test]
fn oracle_matches_independent_fixture() {
    let t = fixture_tensors();
    assert_eq!(t.len(), 4);
    let p = Pattern::sliding(8, -1, 1).unwrap();
    let o = masked_attention(&t[0], &t[1], &t[2], &p, true).unwrap();
    assert!(max_rel_diff(&o, &t[3]) < 1e-12);
}

#[test]
fn simulator_matches_independent_fixture() {
    let t = fixture_tensors();
    let p = Pattern::sliding(8, -1, 1).unwrap();
    let cfg = ArrayConfig::new(4, 2, 4).unwrap();
    let s = schedule(&p, &cfg).unwrap();
    let r = GoldenSimulator::float(cfg)
        .unwrap()
        .run(&s, &t[0], &t[1], &t[2])
        .unwrap();
    assert!(max_rel_diff(&r.outputs, &t[3]) < 1e-9);
}

#[test]
fn one_pe_one_token() {
    let p = Pattern::sliding(1, 0, 0).unwrap();
    let cfg = ArrayConfig::new(1, 1, 1).unwrap().without_globals();
    let s = schedule(&p, &cfg).unwrap();
    let one = Tensor::from_rows(&[vec![1.0]]).unwrap();
    let r = GoldenSimulator::float(cfg)
        .unwrap()
        .run(&s, &one, &one, &one)
        .unwrap();
    assert_eq!(r.outputs.row(0), &[1.0]);
    assert!((r.weights[0] - 1f64.exp()).abs() < 1e-15);
}

#[test]
fn full_pass_ledger_equals_closed_form() {
    let p = Pattern::new(32, vec![WindowSpec::centered(32).unwrap()], Boundary::Wrap).unwrap();
    let cfg = ArrayConfig::reference(64).without_globals();
    let s = schedule(&p, &cfg).unwrap();
    assert_eq!(s.passes.len(), 1);
    let [q, k, v] = inputs(32, 64, 5);
    let r = GoldenSimulator::float(cfg)
        .unwrap()
        .run(&s, &q, &k, &v)
        .unwrap();
    // s1 = d + cols - 1, s3 = cols + recip + broadcast, s5 = d + cols
    assert_eq!(r.ledger.stage_cycles, [64 + 31, 2, 32 + 4 + 1, 1, 64 + 32]);
    assert_eq!(
        r.ledger.total_cycles,
        r.ledger.stage_cycles.iter().sum::<u64>()
    );
    assert_eq!(r.ledger.useful_macs, 2 * 64 * 32 * 32);
    assert!(r.ledger.useful_macs <= r.ledger.pe_count * r.ledger.total_cycles);
    assert!((r.ledger.mac_utilization() - 1.0).abs() < 1e-12);
}
