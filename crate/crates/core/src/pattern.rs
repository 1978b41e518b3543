//! Hybrid sparse attention patterns.
//!
//! A [`Pattern`] is the single answer to "is score (i, j) computed?". It is a
//! union of window clauses (sliding or dilated, described by [`WindowSpec`])
//! plus a set of global tokens whose rows and columns are fully computed.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a window behaves when it runs past the ends of the sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Keys outside `[0, n)` are dropped; edge rows attend to fewer keys.
    #[default]
    Clip,
    /// Offsets wrap modulo the sequence length; every row keeps all `w` keys.
    Wrap,
}

/// Relative window `[lo, hi]` with a stride of `dilation` between attended keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawWindow", into = "RawWindow")]
pub struct WindowSpec {
    lo: i64,
    hi: i64,
    dilation: usize,
}

#[derive(Serialize, Deserialize)]
struct RawWindow {
    lo: i64,
    hi: i64,
    #[serde(default = "one")]
    dilation: usize,
}

fn one() -> usize {
    1
}

impl TryFrom<RawWindow> for WindowSpec {
    type Error = Error;
    fn try_from(raw: RawWindow) -> Result<Self> {
        WindowSpec::new(raw.lo, raw.hi, raw.dilation)
    }
}

impl From<WindowSpec> for RawWindow {
    fn from(w: WindowSpec) -> Self {
        RawWindow {
            lo: w.lo,
            hi: w.hi,
            dilation: w.dilation,
        }
    }
}

impl WindowSpec {
    pub fn new(lo: i64, hi: i64, dilation: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidWindow(format!("lo {lo} > hi {hi}")));
        }
        if dilation == 0 {
            return Err(Error::InvalidWindow("dilation must be >= 1".into()));
        }
        if (hi - lo) % dilation as i64 != 0 {
            return Err(Error::InvalidWindow(format!(
                "span {} is not divisible by dilation {dilation}",
                hi - lo
            )));
        }
        Ok(WindowSpec { lo, hi, dilation })
    }

    pub fn sliding(lo: i64, hi: i64) -> Result<Self> {
        Self::new(lo, hi, 1)
    }

    /// Sliding window of `w` keys around the query: `[-(w/2), w - w/2 - 1]`.
    pub fn centered(w: usize) -> Result<Self> {
        if w == 0 {
            return Err(Error::InvalidWindow("window size must be >= 1".into()));
        }
        let lo = -((w / 2) as i64);
        Self::sliding(lo, lo + w as i64 - 1)
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.hi
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Number of keys in the window, `(hi - lo) / dilation + 1`.
    pub fn size(&self) -> usize {
        ((self.hi - self.lo) / self.dilation as i64) as usize + 1
    }

    /// Relative offsets `lo, lo + dilation, ..., hi`.
    pub fn offsets(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.size()).map(move |k| self.lo + (k * self.dilation) as i64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    start: usize,
    len: usize,
}

/// Exact size of a pattern.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternStats {
    pub computed_pairs: u64,
    pub density: f64,
}

/// A hybrid sparse attention pattern over a sequence of `seq_len` tokens.
///
/// The sequence may be partitioned into independent blocks (the result of
/// reordering a dilated pattern); window clauses never cross a block.
/// Patterns are immutable once built.
#[derive(Clone, Debug)]
pub struct Pattern {
    seq_len: usize,
    windows: Vec<WindowSpec>,
    boundary: Boundary,
    globals: Vec<usize>,
    is_global: Vec<bool>,
    blocks: Vec<Block>,
    block_of: Vec<u32>,
    // unique offsets in slot order: window by window, ascending within a window
    offsets: Vec<i64>,
    min_offset: i64,
    offset_mask: Vec<bool>,
    wrap_masks: Vec<(usize, Vec<bool>)>,
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.seq_len == other.seq_len
            && self.windows == other.windows
            && self.boundary == other.boundary
            && self.globals == other.globals
            && self.blocks == other.blocks
    }
}

impl Pattern {
    /// Union of `windows` over a single block covering the whole sequence.
    pub fn new(seq_len: usize, windows: Vec<WindowSpec>, boundary: Boundary) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::InvalidPattern("sequence length must be >= 1".into()));
        }
        Self::with_blocks(seq_len, windows, boundary, vec![seq_len], Vec::new())
    }

    /// Plain sliding window `[lo, hi]`, clipped at the sequence edges.
    pub fn sliding(seq_len: usize, lo: i64, hi: i64) -> Result<Self> {
        Self::new(seq_len, vec![WindowSpec::sliding(lo, hi)?], Boundary::Clip)
    }

    /// Dilated window `lo, lo + dilation, ..., hi`, clipped at the sequence edges.
    pub fn dilated(seq_len: usize, lo: i64, hi: i64, dilation: usize) -> Result<Self> {
        Self::new(
            seq_len,
            vec![WindowSpec::new(lo, hi, dilation)?],
            Boundary::Clip,
        )
    }

    /// Flattened `height x width` image with a centered `kh x kw` 2-D window,
    /// expressed as `kw` dilated bands with dilation `width`.
    pub fn window_2d(
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        boundary: Boundary,
    ) -> Result<Self> {
        if height == 0 || width == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidPattern(
                "2-D window dimensions must be >= 1".into(),
            ));
        }
        let v_lo = -((kh / 2) as i64);
        let v_hi = v_lo + kh as i64 - 1;
        let h_lo = -((kw / 2) as i64);
        let w = width as i64;
        let windows = (0..kw as i64)
            .map(|k| {
                let h = h_lo + k;
                WindowSpec::new(h + v_lo * w, h + v_hi * w, width)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height * width, windows, boundary)
    }

    pub(crate) fn with_blocks(
        seq_len: usize,
        windows: Vec<WindowSpec>,
        boundary: Boundary,
        block_lens: Vec<usize>,
        globals: Vec<usize>,
    ) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::InvalidPattern(
                "at least one window is required".into(),
            ));
        }
        if block_lens.iter().sum::<usize>() != seq_len || block_lens.contains(&0) {
            return Err(Error::InvalidPattern(
                "blocks must tile the sequence".into(),
            ));
        }
        let mut offsets = Vec::new();
        let mut seen = BTreeSet::new();
        for w in &windows {
            for o in w.offsets() {
                if seen.insert(o) {
                    offsets.push(o);
                }
            }
        }
        let min_offset = *seen.first().unwrap();
        let max_offset = *seen.last().unwrap();
        let mut offset_mask = vec![false; (max_offset - min_offset) as usize + 1];
        for &o in &offsets {
            offset_mask[(o - min_offset) as usize] = true;
        }

        let mut blocks = Vec::with_capacity(block_lens.len());
        let mut block_of = Vec::with_capacity(seq_len);
        let mut start = 0;
        for (b, &len) in block_lens.iter().enumerate() {
            blocks.push(Block { start, len });
            block_of.extend(std::iter::repeat_n(b as u32, len));
            start += len;
        }

        let mut wrap_masks: Vec<(usize, Vec<bool>)> = Vec::new();
        if boundary == Boundary::Wrap {
            for blk in &blocks {
                if (max_offset - min_offset) as usize >= blk.len {
                    return Err(Error::InvalidPattern(format!(
                        "wrapped window spans {} offsets but a block has only {} tokens",
                        max_offset - min_offset + 1,
                        blk.len
                    )));
                }
                if wrap_masks.iter().all(|(l, _)| *l != blk.len) {
                    let mut mask = vec![false; blk.len];
                    for &o in &offsets {
                        mask[o.rem_euclid(blk.len as i64) as usize] = true;
                    }
                    wrap_masks.push((blk.len, mask));
                }
            }
        }

        let pattern = Pattern {
            seq_len,
            windows,
            boundary,
            globals: Vec::new(),
            is_global: vec![false; seq_len],
            blocks,
            block_of,
            offsets,
            min_offset,
            offset_mask,
            wrap_masks,
        };
        pattern.with_globals(globals)
    }

    /// Adds global tokens: their full rows and columns become members.
    pub fn with_globals<I: IntoIterator<Item = usize>>(mut self, idxs: I) -> Result<Self> {
        let mut set: BTreeSet<usize> = self.globals.iter().copied().collect();
        for g in idxs {
            if g >= self.seq_len {
                return Err(Error::GlobalOutOfRange {
                    index: g,
                    seq_len: self.seq_len,
                });
            }
            set.insert(g);
        }
        self.globals = set.into_iter().collect();
        for &g in &self.globals {
            self.is_global[g] = true;
        }
        Ok(self)
    }

    pub fn with_boundary(self, boundary: Boundary) -> Result<Self> {
        let lens = self.block_lens();
        Self::with_blocks(self.seq_len, self.windows, boundary, lens, self.globals)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn windows(&self) -> &[WindowSpec] {
        &self.windows
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn globals(&self) -> &[usize] {
        &self.globals
    }

    pub fn is_global(&self, i: usize) -> bool {
        self.is_global[i]
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len).collect()
    }

    /// The common dilation of all windows, if there is one.
    pub fn dilation(&self) -> Option<usize> {
        let d = self.windows[0].dilation;
        self.windows.iter().all(|w| w.dilation == d).then_some(d)
    }

    /// Distinct relative offsets in slot order. Its length is the effective
    /// window size of every row before clipping.
    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    /// Effective window size (number of distinct offsets).
    pub fn window_size(&self) -> usize {
        self.offsets.len()
    }

    /// True iff (i, j) is covered by a window clause (ignores globals).
    pub fn in_window(&self, i: usize, j: usize) -> bool {
        let bi = self.block_of[i];
        if bi != self.block_of[j] {
            return false;
        }
        let blk = self.blocks[bi as usize];
        let rel = j as i64 - i as i64;
        match self.boundary {
            Boundary::Clip => {
                let k = rel - self.min_offset;
                k >= 0 && (k as usize) < self.offset_mask.len() && self.offset_mask[k as usize]
            }
            Boundary::Wrap => {
                let mask = &self
                    .wrap_masks
                    .iter()
                    .find(|(l, _)| *l == blk.len)
                    .expect("mask for every block length")
                    .1;
                mask[rel.rem_euclid(blk.len as i64) as usize]
            }
        }
    }

    /// Whether score (i, j) is computed.
    pub fn membership(&self, i: usize, j: usize) -> bool {
        assert!(i < self.seq_len && j < self.seq_len, "index out of range");
        self.is_global[i] || self.is_global[j] || self.in_window(i, j)
    }

    /// Key held by window slot `slot` of query `i`, `None` when clipped.
    pub fn slot_key(&self, i: usize, slot: usize) -> Option<usize> {
        let blk = self.blocks[self.block_of[i] as usize];
        let local = (i - blk.start) as i64 + self.offsets[slot];
        match self.boundary {
            Boundary::Clip => (0..blk.len as i64)
                .contains(&local)
                .then(|| blk.start + local as usize),
            Boundary::Wrap => Some(blk.start + local.rem_euclid(blk.len as i64) as usize),
        }
    }

    /// Window keys of query `i`, one entry per slot.
    pub fn row_slots(&self, i: usize) -> Vec<Option<usize>> {
        (0..self.offsets.len())
            .map(|s| self.slot_key(i, s))
            .collect()
    }

    /// Exact number of computed pairs, summed row by row.
    pub fn stats(&self) -> PatternStats {
        let n = self.seq_len;
        let mut pairs = 0u64;
        for i in 0..n {
            if self.is_global[i] {
                pairs += n as u64;
                continue;
            }
            let mut row = 0u64;
            for s in 0..self.offsets.len() {
                if let Some(j) = self.slot_key(i, s) {
                    if !self.is_global[j] {
                        row += 1;
                    }
                }
            }
            pairs += row + self.globals.len() as u64;
        }
        PatternStats {
            computed_pairs: pairs,
            density: pairs as f64 / (n as f64 * n as f64),
        }
    }

    /// One character per (i, j): `#` window, `G` global-only, `.` skipped.
    pub fn raster(&self) -> String {
        let mut out = String::with_capacity(self.seq_len * (self.seq_len + 1));
        for i in 0..self.seq_len {
            for j in 0..self.seq_len {
                out.push(if self.in_window(i, j) {
                    '#'
                } else if self.membership(i, j) {
                    'G'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn to_section(&self) -> PatternSection {
        let single = self.windows.len() == 1;
        let w = self.windows[0];
        PatternSection {
            n: self.seq_len,
            lo: single.then_some(w.lo),
            hi: single.then_some(w.hi),
            dilation: single.then_some(w.dilation),
            windows: (!single).then(|| self.windows.clone()),
            globals: self.globals.clone(),
            boundary: self.boundary,
            blocks: (self.blocks.len() > 1).then(|| self.block_lens()),
        }
    }

    /// Plain-text `[pattern]` config section.
    pub fn to_config_string(&self) -> String {
        #[derive(Serialize)]
        struct Wrapper<'a> {
            pattern: &'a PatternSection,
        }
        toml::to_string(&Wrapper {
            pattern: &self.to_section(),
        })
        .expect("pattern section serializes")
    }

    /// Parses a document containing a `[pattern]` section.
    pub fn from_config_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wrapper {
            pattern: PatternSection,
        }
        let w: Wrapper = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        w.pattern.build()
    }
}

/// Serialized form of a [`Pattern`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSection {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<Vec<WindowSpec>>,
    #[serde(default)]
    pub globals: Vec<usize>,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
}

impl PatternSection {
    pub fn build(&self) -> Result<Pattern> {
        let mut windows = self.windows.clone().unwrap_or_default();
        match (self.lo, self.hi) {
            (Some(lo), Some(hi)) => {
                windows.push(WindowSpec::new(lo, hi, self.dilation.unwrap_or(1))?)
            }
            (None, None) => {}
            _ => return Err(Error::Parse("`lo` and `hi` must be given together".into())),
        }
        if self.n == 0 {
            return Err(Error::InvalidPattern("sequence length must be >= 1".into()));
        }
        let blocks = self.blocks.clone().unwrap_or_else(|| vec![self.n]);
        Pattern::with_blocks(self.n, windows, self.boundary, blocks, self.globals.clone())
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = format!("n={} boundary={:?} windows=", self.seq_len, self.boundary);
        for (k, w) in self.windows.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "[{}..{}/{}]", w.lo, w.hi, w.dilation);
        }
        let _ = write!(s, " globals={:?}", self.globals);
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn members(p: &Pattern, i: usize) -> Vec<usize> {
        (0..p.seq_len()).filter(|&j| p.membership(i, j)).collect()
    }

    fn brute_pairs(p: &Pattern) -> u64 {
        let n = p.seq_len();
        let mut c = 0;
        for i in 0..n {
            for j in 0..n {
                if p.membership(i, j) {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn sliding_rows_are_clipped() {
        let p = Pattern::sliding(8, -1, 1).unwrap();
        assert_eq!(members(&p, 0), vec![0, 1]);
        assert_eq!(members(&p, 3), vec![2, 3, 4]);
        assert!(!p.membership(0, 7));
    }

    #[test]
    fn degenerate_sequence() {
        let p = Pattern::sliding(1, 0, 0).unwrap();
        let s = p.stats();
        assert_eq!(s.computed_pairs, 1);
        assert_eq!(s.density, 1.0);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(Pattern::sliding(8, 2, 1).is_err());
        assert!(Pattern::dilated(8, -2, 1, 2).is_err());
        assert!(WindowSpec::new(0, 0, 0).is_err());
        assert!(Pattern::sliding(0, 0, 0).is_err());
    }

    #[test]
    fn dilated_rows() {
        let p = Pattern::dilated(8, -2, 2, 2).unwrap();
        assert_eq!(members(&p, 4), vec![2, 4, 6]);
        let diag = Pattern::dilated(8, 0, 0, 3).unwrap();
        for i in 0..8 {
            assert_eq!(members(&diag, i), vec![i]);
        }
    }

    #[test]
    fn star_transformer_row() {
        // 1-based q_6 -> k_5, k_6, k_7 is row 5 -> 4, 5, 6 here
        let p = Pattern::sliding(10, -1, 1).unwrap();
        assert_eq!(members(&p, 5), vec![4, 5, 6]);
    }

    #[test]
    fn globals_fill_rows_and_columns() {
        let p = Pattern::sliding(8, -1, 1)
            .unwrap()
            .with_globals([0])
            .unwrap();
        for j in 0..8 {
            assert!(p.membership(0, j));
            assert!(p.membership(j, 0));
        }
        assert!(!p.membership(5, 2));
        let q = Pattern::sliding(8, -1, 1).unwrap();
        assert_eq!(q.clone().with_globals([]).unwrap(), q);
        assert!(matches!(
            q.with_globals([8]),
            Err(Error::GlobalOutOfRange { index: 8, .. })
        ));
    }

    #[test]
    fn longformer_global_adds_less_than_two_rows() {
        let base = Pattern::new(
            4096,
            vec![WindowSpec::centered(512).unwrap()],
            Boundary::Clip,
        )
        .unwrap();
        let with = base.clone().with_globals([0]).unwrap();
        let (a, b) = (base.stats(), with.stats());
        assert!(b.density > a.density);
        let added = b.computed_pairs - a.computed_pairs;
        assert!(added < 2 * 4096);
        // added = (n - |row 0|) + (n - |col 0|): row 0 keeps keys 0..=255,
        // column 0 is in the window of queries 0..=256
        assert_eq!(added, (4096 - 256) + (4096 - 257));
    }

    #[test]
    fn longformer_density_wraps_to_table_value() {
        let p = Pattern::new(
            4096,
            vec![WindowSpec::centered(512).unwrap()],
            Boundary::Wrap,
        )
        .unwrap();
        assert_eq!(p.stats().density, 0.125);
        let clipped = p.with_boundary(Boundary::Clip).unwrap();
        // 4096*512 - (256*257 + 255*256)/2
        assert_eq!(clipped.stats().computed_pairs, 2_031_616);
    }

    #[test]
    fn stats_matches_brute_force() {
        let cases = vec![
            Pattern::sliding(37, -5, 3)
                .unwrap()
                .with_globals([0, 17])
                .unwrap(),
            Pattern::dilated(50, -6, 9, 3)
                .unwrap()
                .with_globals([49])
                .unwrap(),
            Pattern::window_2d(6, 7, 3, 5, Boundary::Clip)
                .unwrap()
                .with_globals([3])
                .unwrap(),
            Pattern::window_2d(6, 7, 3, 3, Boundary::Wrap)
                .unwrap()
                .with_globals([0, 1])
                .unwrap(),
            Pattern::new(
                40,
                vec![
                    WindowSpec::sliding(-3, 3).unwrap(),
                    WindowSpec::new(-8, 8, 4).unwrap(),
                ],
                Boundary::Wrap,
            )
            .unwrap(),
        ];
        for p in cases {
            assert_eq!(p.stats().computed_pairs, brute_pairs(&p), "{p}");
        }
    }

    #[test]
    fn window_2d_matches_image_neighbourhood() {
        // wrap in the flattened index space: offsets h + W*v
        let (h, w) = (5, 6);
        let p = Pattern::window_2d(h, w, 3, 3, Boundary::Wrap).unwrap();
        let n = h * w;
        for i in 0..n {
            let expect: BTreeSet<usize> = (-1i64..=1)
                .flat_map(|v| (-1i64..=1).map(move |dx| v * w as i64 + dx))
                .map(|o| (i as i64 + o).rem_euclid(n as i64) as usize)
                .collect();
            assert_eq!(members(&p, i), expect.into_iter().collect::<Vec<_>>());
        }
        assert_eq!(p.window_size(), 9);
    }

    #[test]
    fn wrap_rejects_windows_wider_than_sequence() {
        assert!(
            Pattern::new(8, vec![WindowSpec::sliding(-4, 4).unwrap()], Boundary::Wrap).is_err()
        );
    }

    #[test]
    fn raster_small() {
        let p = Pattern::sliding(4, 0, 1)
            .unwrap()
            .with_globals([3])
            .unwrap();
        assert_eq!(p.raster(), "##.G\n.##G\n..##\nGGG#\n");
    }

    #[test]
    fn config_section_round_trip() {
        let p = Pattern::dilated(30, -6, 6, 3)
            .unwrap()
            .with_globals([0, 29])
            .unwrap();
        let text = p.to_config_string();
        assert!(text.contains("[pattern]"));
        assert_eq!(Pattern::from_config_str(&text).unwrap(), p);
        let multi = Pattern::window_2d(4, 4, 3, 3, Boundary::Wrap).unwrap();
        assert_eq!(
            Pattern::from_config_str(&multi.to_config_string()).unwrap(),
            multi
        );
        assert!(Pattern::from_config_str("[pattern]\nn = 4\nlo = 2\nhi = 1\n").is_err());
    }
}
