//! Maps a [`Pattern`] onto a fixed PE array.
//!
//! Dilated windows are first reordered into sliding ones (queries grouped by
//! residue class), then the pattern is split by sequence (query chunks of at
//! most `rows`) and by window (fragments of at most `cols` slots). Global
//! tokens ride along on the global PE row and column of the window passes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{Boundary, Pattern, WindowSpec};

/// On-chip buffer capacities in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub query_bytes: usize,
    pub key_bytes: usize,
    pub value_bytes: usize,
    pub output_bytes: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            query_bytes: 16 * 1024,
            key_bytes: 32 * 1024,
            value_bytes: 32 * 1024,
            output_bytes: 32 * 1024,
        }
    }
}

/// PE array geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub head_dim: usize,
    pub has_global_row: bool,
    pub has_global_col: bool,
    #[serde(default)]
    pub buffers: BufferConfig,
}

impl ArrayConfig {
    /// `rows x cols` array with one global PE row and one global PE column.
    pub fn new(rows: usize, cols: usize, head_dim: usize) -> Result<Self> {
        let cfg = ArrayConfig {
            rows,
            cols,
            head_dim,
            has_global_row: true,
            has_global_col: true,
            buffers: BufferConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The 32x32 array of the reference design.
    pub fn reference(head_dim: usize) -> Self {
        Self::new(32, 32, head_dim).expect("32x32 is valid")
    }

    pub fn without_globals(mut self) -> Self {
        self.has_global_row = false;
        self.has_global_col = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "rows, cols and head_dim must be >= 1 (got {}x{}, d={})",
                self.rows, self.cols, self.head_dim
            )));
        }
        Ok(())
    }

    /// Columns a row-wise chain passes through, including the global column.
    pub fn chain_len(&self) -> usize {
        self.cols + usize::from(self.has_global_col)
    }

    /// Every PE, including the global row and column.
    pub fn pe_count(&self) -> usize {
        self.rows * self.cols
            + if self.has_global_row { self.cols } else { 0 }
            + if self.has_global_col { self.rows } else { 0 }
    }
}

/// Global-row work in a pass: query `token` against `keys`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalRowTask {
    pub token: usize,
    pub keys: Vec<usize>,
}

/// Global-column work in a pass: key `token` against the queries in the
/// listed row slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalColTask {
    pub token: usize,
    pub rows: Vec<usize>,
}

/// One execution of the PE array.
///
/// `keys[r][c]` is the key held by PE (r, c). Within a fragment the window
/// slots are laid out with the largest offset in column 0, so a sliding
/// window places the key of PE (r, c) at PE (r+1, c+1) for the next query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePass {
    pub query_rows: Vec<usize>,
    pub keys: Vec<Vec<Option<usize>>>,
    /// Window fragment, `None` for a dedicated global pass.
    pub part_index: Option<usize>,
    pub global_row: Option<GlobalRowTask>,
    pub global_col: Option<GlobalColTask>,
}

impl TilePass {
    /// Keys streamed through the main array.
    pub fn streamed_keys(&self) -> BTreeSet<usize> {
        self.keys.iter().flatten().flatten().copied().collect()
    }

    pub fn window_cells(&self) -> usize {
        self.keys.iter().flatten().filter(|k| k.is_some()).count()
    }

    pub fn global_cells(&self) -> usize {
        self.global_row.as_ref().map_or(0, |g| g.keys.len())
            + self.global_col.as_ref().map_or(0, |g| g.rows.len())
    }

    /// Every computed (query, key) cell of the pass, in schedule index space.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.window_cells() + self.global_cells());
        for (r, row) in self.keys.iter().enumerate() {
            for k in row.iter().flatten() {
                out.push((self.query_rows[r], *k));
            }
        }
        if let Some(g) = &self.global_row {
            out.extend(g.keys.iter().map(|&k| (g.token, k)));
        }
        if let Some(g) = &self.global_col {
            out.extend(g.rows.iter().map(|&r| (self.query_rows[r], g.token)));
        }
        out
    }
}

/// Ordered passes plus the query permutation applied by reordering.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSchedule {
    pub passes: Vec<TilePass>,
    /// `q_perm[a]` is the original index of schedule position `a`.
    pub q_perm: Vec<usize>,
    /// Number of passes holding window cells for each schedule position.
    pub parts_per_query: Vec<usize>,
    pub fragments: usize,
    pub rows: usize,
    pub cols: usize,
    /// More global tokens than the global row/column can absorb; dedicated
    /// passes were added.
    pub over_capacity: bool,
}

impl TileSchedule {
    pub fn window_passes(&self) -> usize {
        self.passes
            .iter()
            .filter(|p| p.part_index.is_some())
            .count()
    }

    pub fn dedicated_passes(&self) -> usize {
        self.passes.len() - self.window_passes()
    }

    pub fn is_identity_perm(&self) -> bool {
        self.q_perm.iter().enumerate().all(|(a, &i)| a == i)
    }

    /// Structured text, one line per pass.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "schedule n={} array={}x{} passes={} fragments={} perm={} over_capacity={}\n",
            self.q_perm.len(),
            self.rows,
            self.cols,
            self.passes.len(),
            self.fragments,
            if self.is_identity_perm() {
                "identity".to_string()
            } else {
                compact(&self.q_perm)
            },
            self.over_capacity
        );
        for (idx, p) in self.passes.iter().enumerate() {
            let part = p.part_index.map_or("-".to_string(), |f| f.to_string());
            let keys: Vec<String> = p
                .keys
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|k| k.map_or("_".to_string(), |k| k.to_string()))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect();
            let grow = p.global_row.as_ref().map_or("-".to_string(), |g| {
                format!("{}:{}", g.token, compact(&g.keys))
            });
            let gcol = p.global_col.as_ref().map_or("-".to_string(), |g| {
                format!("{}:{}", g.token, compact(&g.rows))
            });
            let _ = writeln!(
                out,
                "pass {idx} part={part} rows={} keys={} grow={grow} gcol={gcol}",
                compact(&p.query_rows),
                if keys.is_empty() {
                    "-".to_string()
                } else {
                    keys.join("|")
                }
            );
        }
        out
    }
}

// "0..4,7,9..11" style run-length list
fn compact(xs: &[usize]) -> String {
    if xs.is_empty() {
        return "-".into();
    }
    let mut parts = Vec::new();
    let mut start = xs[0];
    let mut prev = xs[0];
    for &x in &xs[1..] {
        if x == prev + 1 {
            prev = x;
            continue;
        }
        parts.push((start, prev));
        start = x;
        prev = x;
    }
    parts.push((start, prev));
    parts
        .into_iter()
        .map(|(a, b)| {
            if a == b {
                a.to_string()
            } else {
                format!("{a}..{}", b + 1)
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Groups queries by residue class modulo the dilation so a dilated pattern
/// becomes a sliding one inside each class.
///
/// Returns `(q_perm, reordered)` with `reordered.membership(a, b) ==
/// p.membership(q_perm[a], q_perm[b])`. Patterns that cannot be reordered
/// (mixed dilations, offsets that change residue class, wrapped windows over
/// a length not divisible by the dilation) come back unchanged with the
/// identity permutation.
pub fn reorder(p: &Pattern) -> (Vec<usize>, Pattern) {
    let n = p.seq_len();
    let identity = || ((0..n).collect(), p.clone());
    let Some(d) = p.dilation() else {
        return identity();
    };
    let d_i = d as i64;
    if d == 1
        || p.block_lens().len() != 1
        || p.windows().iter().any(|w| w.lo() % d_i != 0)
        || (p.boundary() == Boundary::Wrap && !n.is_multiple_of(d))
    {
        return identity();
    }
    let q_perm: Vec<usize> = (0..d).flat_map(|r| (r..n).step_by(d)).collect();
    let blocks: Vec<usize> = (0..d)
        .map(|r| (r..n).step_by(d).count())
        .filter(|&l| l > 0)
        .collect();
    let mut pos = vec![0; n];
    for (a, &i) in q_perm.iter().enumerate() {
        pos[i] = a;
    }
    let windows: Option<Vec<WindowSpec>> = p
        .windows()
        .iter()
        .map(|w| WindowSpec::sliding(w.lo() / d_i, w.hi() / d_i).ok())
        .collect();
    let globals = p.globals().iter().map(|&g| pos[g]).collect();
    match windows.and_then(|w| Pattern::with_blocks(n, w, p.boundary(), blocks, globals).ok()) {
        Some(re) => (q_perm, re),
        None => identity(),
    }
}

/// Largest number of global tokens one global row and one global column can
/// serve: `min(ceil(n / rows), ceil(w / cols))`.
pub fn global_capacity(n: usize, w: usize, cfg: &ArrayConfig) -> usize {
    if !(cfg.has_global_row && cfg.has_global_col) {
        return 0;
    }
    n.div_ceil(cfg.rows).min(w.div_ceil(cfg.cols))
}

/// Tiles `p` (already reordered) onto the array: query chunks outer, window
/// fragments inner, global tokens packed onto the global row and column.
pub fn split(p: &Pattern, cfg: &ArrayConfig) -> Result<TileSchedule> {
    cfg.validate()?;
    if !p.globals().is_empty() && !(cfg.has_global_row && cfg.has_global_col) {
        return Err(Error::InvalidConfig(
            "pattern has global tokens but the array has no global row/column".into(),
        ));
    }
    let n = p.seq_len();
    let (rows, cols) = (cfg.rows, cfg.cols);
    let slots = p.window_size();
    let fragments = slots.div_ceil(cols);
    let chunks = n.div_ceil(rows);

    let mut passes = Vec::with_capacity(chunks * fragments);
    let mut parts_per_query = vec![0; n];
    for c in 0..chunks {
        let query_rows: Vec<usize> = (c * rows..((c + 1) * rows).min(n)).collect();
        for f in 0..fragments {
            let first = f * cols;
            let len = (slots - first).min(cols);
            let keys: Vec<Vec<Option<usize>>> = query_rows
                .iter()
                .map(|&i| {
                    (0..cols)
                        .map(|col| {
                            (col < len)
                                .then(|| p.slot_key(i, first + len - 1 - col))
                                .flatten()
                        })
                        .collect()
                })
                .collect();
            for (r, row) in keys.iter().enumerate() {
                if row.iter().any(Option::is_some) {
                    parts_per_query[query_rows[r]] += 1;
                }
            }
            passes.push(TilePass {
                query_rows: query_rows.clone(),
                keys,
                part_index: Some(f),
                global_row: None,
                global_col: None,
            });
        }
    }

    let mut dedicated = assign_global_rows(p, &mut passes, fragments, cols);
    for &g in p.globals() {
        // global column: every non-global query of each chunk against key g
        for c in 0..chunks {
            let chunk = &mut passes[c * fragments..(c + 1) * fragments];
            let need: Vec<usize> = chunk[0]
                .query_rows
                .iter()
                .enumerate()
                .filter(|&(_, &i)| !p.is_global(i) && !p.in_window(i, g))
                .map(|(r, _)| r)
                .collect();
            if need.is_empty() {
                continue;
            }
            let task = GlobalColTask {
                token: g,
                rows: need,
            };
            match chunk.iter_mut().find(|pass| pass.global_col.is_none()) {
                Some(pass) => pass.global_col = Some(task),
                None => {
                    let query_rows = chunk[0].query_rows.clone();
                    dedicated.push(TilePass {
                        keys: vec![Vec::new(); query_rows.len()],
                        query_rows,
                        part_index: None,
                        global_row: None,
                        global_col: Some(task),
                    });
                }
            }
        }
    }
    let w = p.window_size();
    let over_capacity = !dedicated.is_empty() || p.globals().len() > global_capacity(n, w, cfg);
    passes.extend(dedicated);

    Ok(TileSchedule {
        passes,
        q_perm: (0..n).collect(),
        parts_per_query,
        fragments,
        rows,
        cols,
        over_capacity,
    })
}

/// Global-row work: every global token against each key outside its window.
///
/// Token `t` owns the passes of fragments `f` with `f % n_g == t` (plain
/// round-robin when tokens outnumber fragments); each token's keys are then
/// matched to its passes, at most `cols` per pass and only to a pass that
/// streams the key. Unmatched keys go to dedicated passes.
fn assign_global_rows(
    p: &Pattern,
    passes: &mut [TilePass],
    fragments: usize,
    cols: usize,
) -> Vec<TilePass> {
    let globals = p.globals();
    let ng = globals.len();
    if ng == 0 {
        return Vec::new();
    }
    let n = p.seq_len();
    let streams: Vec<BTreeSet<usize>> = passes.iter().map(TilePass::streamed_keys).collect();
    let needed: Vec<BTreeSet<usize>> = globals
        .iter()
        .map(|&g| (0..n).filter(|&j| !p.in_window(g, j)).collect())
        .collect();
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); ng];
    for idx in 0..passes.len() {
        // a token that keeps one fragment sees a shifted copy of every
        // chunk's keys, which tiles the sequence
        let owner = if ng <= fragments {
            idx % fragments % ng
        } else {
            idx % ng
        };
        owned[owner].push(idx);
    }
    let plans: Vec<_> = (0..ng)
        .map(|t| match_keys(&needed[t], &owned[t], &streams, cols))
        .collect();

    let mut dedicated = Vec::new();
    for (t, (matched, left)) in plans.into_iter().enumerate() {
        let g = globals[t];
        for (idx, keys) in matched {
            passes[idx].global_row = Some(GlobalRowTask { token: g, keys });
        }
        for keys in left.chunks(cols) {
            dedicated.push(TilePass {
                query_rows: Vec::new(),
                keys: Vec::new(),
                part_index: None,
                global_row: Some(GlobalRowTask {
                    token: g,
                    keys: keys.to_vec(),
                }),
                global_col: None,
            });
        }
    }
    dedicated
}

/// Maximum matching of `needed` keys onto `candidates` (pass indices), at
/// most `cap` keys per pass, each key to a pass whose stream contains it.
/// First fit, then augmenting paths for the keys first fit could not place.
/// Returns sorted keys per used pass and the unmatched keys.
fn match_keys(
    needed: &BTreeSet<usize>,
    candidates: &[usize],
    streams: &[BTreeSet<usize>],
    cap: usize,
) -> (Vec<(usize, Vec<usize>)>, Vec<usize>) {
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (slot, &idx) in candidates.iter().enumerate() {
        for k in streams[idx].intersection(needed) {
            adj.entry(*k).or_default().push(slot);
        }
    }
    let mut load: Vec<Vec<usize>> = vec![Vec::new(); candidates.len()];
    let mut unplaced = Vec::new();
    for &k in needed {
        let fit = adj
            .get(&k)
            .and_then(|a| a.iter().copied().find(|&s| load[s].len() < cap));
        match fit {
            Some(s) => load[s].push(k),
            None => unplaced.push(k),
        }
    }

    fn augment(
        k: usize,
        adj: &BTreeMap<usize, Vec<usize>>,
        load: &mut [Vec<usize>],
        visited: &mut [bool],
        cap: usize,
    ) -> bool {
        let Some(slots) = adj.get(&k) else {
            return false;
        };
        for &s in slots {
            if visited[s] {
                continue;
            }
            visited[s] = true;
            if load[s].len() < cap {
                load[s].push(k);
                return true;
            }
            for pos in 0..load[s].len() {
                let other = load[s][pos];
                if augment(other, adj, load, visited, cap) {
                    load[s][pos] = k;
                    return true;
                }
            }
        }
        false
    }

    let mut left = Vec::new();
    for k in unplaced {
        let mut visited = vec![false; candidates.len()];
        if !augment(k, &adj, &mut load, &mut visited, cap) {
            left.push(k);
        }
    }
    let matched = load
        .into_iter()
        .enumerate()
        .filter(|(_, keys)| !keys.is_empty())
        .map(|(slot, mut keys)| {
            keys.sort_unstable();
            (candidates[slot], keys)
        })
        .collect();
    (matched, left)
}

/// Reorders (when the pattern is dilated) and splits.
pub fn schedule(p: &Pattern, cfg: &ArrayConfig) -> Result<TileSchedule> {
    let (q_perm, reordered) = reorder(p);
    let mut s = split(&reordered, cfg)?;
    s.q_perm = q_perm;
    Ok(s)
}

/// Outcome of [`validate`]. Cells are reported in original index space.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub window_cells: usize,
    pub global_row_cells: usize,
    pub global_col_cells: usize,
    pub missing: Vec<(usize, usize)>,
    pub duplicates: Vec<(usize, usize)>,
    pub non_members: Vec<(usize, usize)>,
    /// Passes whose global-row keys were not streamed through the array.
    pub unstreamed_global_keys: Vec<usize>,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty()
            && self.duplicates.is_empty()
            && self.non_members.is_empty()
            && self.errors.is_empty()
    }
}

/// Checks that every member of `p` is computed exactly once and nothing else
/// is computed.
pub fn validate(s: &TileSchedule, p: &Pattern) -> ValidationReport {
    let n = p.seq_len();
    let mut report = ValidationReport::default();
    if s.q_perm.len() != n {
        report.errors.push(format!(
            "schedule covers {} tokens, pattern has {n}",
            s.q_perm.len()
        ));
        return report;
    }
    let mut seen_perm = vec![false; n];
    for &i in &s.q_perm {
        if i >= n || std::mem::replace(&mut seen_perm[i], true) {
            report.errors.push("q_perm is not a permutation".into());
            return report;
        }
    }
    let mut count = vec![0u8; n * n];
    let mut dup = BTreeSet::new();
    let mut bump = |a: usize, b: usize, report: &mut ValidationReport| {
        if a >= n || b >= n {
            report.errors.push(format!("cell ({a}, {b}) out of range"));
            return;
        }
        let (i, j) = (s.q_perm[a], s.q_perm[b]);
        if !p.membership(i, j) {
            report.non_members.push((i, j));
        }
        let c = &mut count[i * n + j];
        *c = c.saturating_add(1);
        if *c == 2 {
            dup.insert((i, j));
        }
    };
    for (idx, pass) in s.passes.iter().enumerate() {
        if pass.keys.len() != pass.query_rows.len() {
            report
                .errors
                .push(format!("pass {idx}: key rows do not match query rows"));
            continue;
        }
        for (r, row) in pass.keys.iter().enumerate() {
            for k in row.iter().flatten() {
                report.window_cells += 1;
                bump(pass.query_rows[r], *k, &mut report);
            }
        }
        if let Some(g) = &pass.global_row {
            let streamed = pass.streamed_keys();
            if pass.part_index.is_some() && g.keys.iter().any(|k| !streamed.contains(k)) {
                report.unstreamed_global_keys.push(idx);
            }
            for &k in &g.keys {
                report.global_row_cells += 1;
                bump(g.token, k, &mut report);
            }
        }
        if let Some(g) = &pass.global_col {
            for &r in &g.rows {
                match pass.query_rows.get(r) {
                    Some(&i) => {
                        report.global_col_cells += 1;
                        bump(i, g.token, &mut report);
                    }
                    None => report
                        .errors
                        .push(format!("pass {idx}: global column row {r} out of range")),
                }
            }
        }
    }
    report.duplicates = dup.into_iter().collect();
    for i in 0..n {
        for j in 0..n {
            if count[i * n + j] == 0 && p.membership(i, j) {
                report.missing.push((i, j));
            }
        }
    }
    report
}
