//! Binary linear codes: parity-check matrices, alist IO, GF(2) systematization,
//! Tanner-graph adjacency, encoding and syndromes.
//!
//! Tanner-graph edges are enumerated in row-major order of `H` (ascending check
//! index, then ascending variable index). Every per-edge tensor in the decoder is
//! laid out in that order, so checkpoints stay portable.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// Errors raised while loading or deriving a code.
#[derive(Debug, thiserror::Error)]
pub enum CodeError {
    #[error("alist line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("parity-check matrix is rank deficient (rank {rank} < {rows} rows)")]
    RankDeficient { rank: usize, rows: usize },
    #[error("check row {0} of H is all zero")]
    ZeroRow(usize),
    #[error("expected a bit vector of length {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("bit vector entry {index} is {value}, not 0 or 1")]
    NotABit { index: usize, value: u8 },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CodeError>;

/// Dense GF(2) matrix with one byte per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    /// Builds a matrix from row slices. Any nonzero entry counts as 1.
    ///
    /// Panics if the rows have differing lengths.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Self::zeros(rows.len(), cols);
        for (j, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            assert_eq!(row.len(), cols, "ragged rows in BitMatrix::from_rows");
            for (i, &b) in row.iter().enumerate() {
                m.set(j, i, b != 0);
            }
        }
        m
    }

    pub fn identity(size: usize) -> Self {
        let mut m = Self::zeros(size, size);
        for i in 0..size {
            m.set(i, i, true);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v as u8;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    fn xor_row_into(&mut self, src: usize, dst: usize) {
        let c = self.cols;
        for i in 0..c {
            self.data[dst * c + i] ^= self.data[src * c + i];
        }
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let c = self.cols;
        for i in 0..c {
            self.data.swap(a * c + i, b * c + i);
        }
    }

    /// Matrix-vector product over GF(2).
    pub fn mul_vec(&self, bits: &[u8]) -> Vec<u8> {
        debug_assert_eq!(bits.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(bits)
                    .fold(0u8, |acc, (&h, &b)| acc ^ (h & b))
            })
            .collect()
    }

    /// Rank over GF(2).
    pub fn rank(&self) -> usize {
        reduce_echelon(&mut self.clone()).len()
    }
}

/// In-place reduction to reduced row echelon form. Returns the pivot column of
/// each leading row, in row order.
fn reduce_echelon(m: &mut BitMatrix) -> Vec<usize> {
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..m.cols {
        if r == m.rows {
            break;
        }
        let Some(p) = (r..m.rows).find(|&i| m.get(i, c)) else {
            continue;
        };
        m.swap_rows(r, p);
        for i in 0..m.rows {
            if i != r && m.get(i, c) {
                m.xor_row_into(r, i);
            }
        }
        pivots.push(c);
        r += 1;
    }
    pivots
}

/// Tanner-graph adjacency over the edge list of `H`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TannerGraph {
    /// `(check j, variable i)` pairs in row-major order of `H`.
    pub edges: Vec<(usize, usize)>,
    /// Edge positions incident to each variable node, ascending.
    pub vn_neighbors: Vec<Vec<usize>>,
    /// Edge positions incident to each check node, ascending.
    pub cn_neighbors: Vec<Vec<usize>>,
}

impl TannerGraph {
    pub fn from_matrix(h: &BitMatrix) -> Self {
        let mut edges = Vec::with_capacity(h.popcount());
        let mut vn_neighbors = vec![Vec::new(); h.cols()];
        let mut cn_neighbors = vec![Vec::new(); h.rows()];
        for j in 0..h.rows() {
            for i in 0..h.cols() {
                if h.get(j, i) {
                    let e = edges.len();
                    edges.push((j, i));
                    vn_neighbors[i].push(e);
                    cn_neighbors[j].push(e);
                }
            }
        }
        Self {
            edges,
            vn_neighbors,
            cn_neighbors,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Check index of every edge, in edge order.
    pub fn edge_checks(&self) -> Vec<usize> {
        self.edges.iter().map(|&(j, _)| j).collect()
    }

    /// Variable index of every edge, in edge order.
    pub fn edge_vars(&self) -> Vec<usize> {
        self.edges.iter().map(|&(_, i)| i).collect()
    }
}

/// A parity-check matrix together with its Tanner graph, as loaded from an
/// alist file. No generator has been derived yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityCheck {
    pub h: BitMatrix,
    pub graph: TannerGraph,
}

impl ParityCheck {
    pub fn new(h: BitMatrix) -> Self {
        let graph = TannerGraph::from_matrix(&h);
        Self { h, graph }
    }

    /// Canonical alist serialization: single spaces, zero padding up to the
    /// maximum degree, trailing newline.
    pub fn to_alist(&self) -> String {
        let (m, n) = (self.h.rows(), self.h.cols());
        let col_deg: Vec<usize> = self.graph.vn_neighbors.iter().map(Vec::len).collect();
        let row_deg: Vec<usize> = self.graph.cn_neighbors.iter().map(Vec::len).collect();
        let max_col = col_deg.iter().copied().max().unwrap_or(0);
        let max_row = row_deg.iter().copied().max().unwrap_or(0);

        let mut out = String::new();
        let join = |v: &mut dyn Iterator<Item = usize>| {
            v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(out, "{n} {m}");
        let _ = writeln!(out, "{max_col} {max_row}");
        let _ = writeln!(out, "{}", join(&mut col_deg.iter().copied()));
        let _ = writeln!(out, "{}", join(&mut row_deg.iter().copied()));
        for nb in &self.graph.vn_neighbors {
            let mut idx: Vec<usize> = nb.iter().map(|&e| self.graph.edges[e].0 + 1).collect();
            idx.resize(max_col, 0);
            let _ = writeln!(out, "{}", join(&mut idx.into_iter()));
        }
        for nb in &self.graph.cn_neighbors {
            let mut idx: Vec<usize> = nb.iter().map(|&e| self.graph.edges[e].1 + 1).collect();
            idx.resize(max_row, 0);
            let _ = writeln!(out, "{}", join(&mut idx.into_iter()));
        }
        out
    }

    /// SHA-256 of the canonical alist text, hex encoded.
    pub fn h_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_alist().as_bytes()))
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> CodeError {
    CodeError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parses MacKay's alist format.
///
/// Layout: `n m`, then the maximum column and row degrees, then the `n`
/// column degrees, then the `m` row degrees, then one line of 1-based row
/// indices per column, then one line of 1-based column indices per row.
/// Zero entries in the index lines are padding. Blank lines are skipped; the
/// reported line numbers are 1-based physical lines.
pub fn parse_alist(text: &str) -> Result<ParityCheck> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(no, l)| (no + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut last_line = 0;
    let mut next_line = |what: &str| -> Result<(usize, Vec<usize>)> {
        let (no, l) = lines
            .next()
            .ok_or_else(|| parse_err(last_line + 1, format!("unexpected end of input, expected {what}")))?;
        last_line = no;
        let nums = l
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| parse_err(no, format!("'{tok}' is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((no, nums))
    };
    let expect_len = |no: usize, v: &[usize], len: usize, what: &str| -> Result<()> {
        if v.len() != len {
            return Err(parse_err(no, format!("expected {len} {what}, found {}", v.len())));
        }
        Ok(())
    };

    let (no, header) = next_line("header 'n m'")?;
    expect_len(no, &header, 2, "header entries")?;
    let (n, m) = (header[0], header[1]);
    if n == 0 || m == 0 {
        return Err(parse_err(no, "n and m must be positive"));
    }
    let (no, maxes) = next_line("maximum degrees")?;
    expect_len(no, &maxes, 2, "maximum degree entries")?;
    let (max_col, max_row) = (maxes[0], maxes[1]);

    let (no, col_deg) = next_line("column degrees")?;
    expect_len(no, &col_deg, n, "column degrees")?;
    if let Some(&d) = col_deg.iter().find(|&&d| d > max_col) {
        return Err(parse_err(no, format!("column degree {d} exceeds declared maximum {max_col}")));
    }
    let (no, row_deg) = next_line("row degrees")?;
    expect_len(no, &row_deg, m, "row degrees")?;
    if let Some(&d) = row_deg.iter().find(|&&d| d > max_row) {
        return Err(parse_err(no, format!("row degree {d} exceeds declared maximum {max_row}")));
    }

    let mut h = BitMatrix::zeros(m, n);
    for (i, &deg) in col_deg.iter().enumerate() {
        let (no, idx) = next_line("column index list")?;
        let entries: Vec<usize> = idx.into_iter().filter(|&x| x != 0).collect();
        if entries.len() != deg {
            return Err(parse_err(
                no,
                format!("column {} lists {} rows but its degree is {deg}", i + 1, entries.len()),
            ));
        }
        for r in entries {
            if r > m {
                return Err(parse_err(no, format!("row index {r} out of range 1..={m}")));
            }
            if h.get(r - 1, i) {
                return Err(parse_err(no, format!("duplicate edge ({r}, {}) in column {}", i + 1, i + 1)));
            }
            h.set(r - 1, i, true);
        }
    }

    let mut seen = BitMatrix::zeros(m, n);
    for (j, &deg) in row_deg.iter().enumerate() {
        let (no, idx) = next_line("row index list")?;
        let entries: Vec<usize> = idx.into_iter().filter(|&x| x != 0).collect();
        if entries.len() != deg {
            return Err(parse_err(
                no,
                format!("row {} lists {} columns but its degree is {deg}", j + 1, entries.len()),
            ));
        }
        for c in entries {
            if c > n {
                return Err(parse_err(no, format!("column index {c} out of range 1..={n}")));
            }
            if seen.get(j, c - 1) {
                return Err(parse_err(no, format!("duplicate edge ({}, {c}) in row {}", j + 1, j + 1)));
            }
            if !h.get(j, c - 1) {
                return Err(parse_err(
                    no,
                    format!("row section lists edge ({}, {c}) missing from the column section", j + 1),
                ));
            }
            seen.set(j, c - 1, true);
        }
    }
    // Every row entry was found among the column entries and the degree sums
    // agree, so the two sections describe the same matrix.
    let col_total: usize = col_deg.iter().sum();
    let row_total: usize = row_deg.iter().sum();
    if col_total != row_total {
        return Err(parse_err(
            last_line,
            format!("column degrees sum to {col_total} but row degrees sum to {row_total}"),
        ));
    }
    Ok(ParityCheck::new(h))
}

/// Derives a generator for `h` by GF(2) Gaussian elimination with column
/// pivoting.
///
/// Returns `(g, column_perm)`. `g` is `k x n` in the original column order,
/// so `g * h^T = 0` holds directly. `column_perm[0..k]` are the information
/// positions (the columns of `g` forming `I_k`) and `column_perm[k..n]` the
/// pivot columns of `h`; permuting the columns of `g` by `column_perm` gives
/// the systematic form `[I_k | P]`.
pub fn systematize(h: &BitMatrix) -> Result<(BitMatrix, Vec<usize>)> {
    let (m, n) = (h.rows(), h.cols());
    let mut red = h.clone();
    let pivots = reduce_echelon(&mut red);
    if pivots.len() < m {
        return Err(CodeError::RankDeficient {
            rank: pivots.len(),
            rows: m,
        });
    }
    let mut is_pivot = vec![false; n];
    for &p in &pivots {
        is_pivot[p] = true;
    }
    let info: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
    let k = info.len();

    // Row r of the reduced matrix reads: x[pivots[r]] = sum over info cols c
    // of red[r][c] * x[c]. Setting information bit a to 1 fixes the codeword.
    let mut g = BitMatrix::zeros(k, n);
    for (a, &c) in info.iter().enumerate() {
        g.set(a, c, true);
        for (r, &p) in pivots.iter().enumerate() {
            if red.get(r, c) {
                g.set(a, p, true);
            }
        }
    }
    let mut perm = info;
    perm.extend_from_slice(&pivots);
    Ok((g, perm))
}

/// A fully specified binary linear code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSpec {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub h: BitMatrix,
    pub graph: TannerGraph,
    pub g: BitMatrix,
    pub column_perm: Vec<usize>,
}

impl CodeSpec {
    pub fn new(name: impl Into<String>, pc: ParityCheck) -> Result<Self> {
        if let Some(j) = (0..pc.h.rows()).find(|&j| pc.h.row(j).iter().all(|&b| b == 0)) {
            return Err(CodeError::ZeroRow(j));
        }
        let (g, column_perm) = systematize(&pc.h)?;
        Ok(Self {
            name: name.into(),
            n: pc.h.cols(),
            k: g.rows(),
            h: pc.h,
            graph: pc.graph,
            g,
            column_perm,
        })
    }

    pub fn from_matrix(name: impl Into<String>, h: BitMatrix) -> Result<Self> {
        Self::new(name, ParityCheck::new(h))
    }

    pub fn from_alist(name: impl Into<String>, text: &str) -> Result<Self> {
        Self::new(name, parse_alist(text)?)
    }

    /// Loads `path`, naming the code after the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CodeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "code".into());
        Self::from_alist(name, &text)
    }

    pub fn checks(&self) -> usize {
        self.n - self.k
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn parity_check(&self) -> ParityCheck {
        ParityCheck {
            h: self.h.clone(),
            graph: self.graph.clone(),
        }
    }

    pub fn to_alist(&self) -> String {
        self.parity_check().to_alist()
    }

    pub fn h_hash(&self) -> String {
        self.parity_check().h_hash()
    }

    /// `c = u * G` over GF(2).
    pub fn encode(&self, u: &[u8]) -> Result<Vec<u8>> {
        check_bits(u, self.k)?;
        let mut c = vec![0u8; self.n];
        for (a, &bit) in u.iter().enumerate() {
            if bit == 1 {
                for (ci, &gb) in c.iter_mut().zip(self.g.row(a)) {
                    *ci ^= gb;
                }
            }
        }
        Ok(c)
    }

    /// `H * bits` over GF(2).
    pub fn syndrome(&self, bits: &[u8]) -> Result<Vec<u8>> {
        check_bits(bits, self.n)?;
        Ok(self.syndrome_unchecked(bits))
    }

    pub(crate) fn syndrome_unchecked(&self, bits: &[u8]) -> Vec<u8> {
        let mut s = vec![0u8; self.checks()];
        for &(j, i) in &self.graph.edges {
            s[j] ^= bits[i];
        }
        s
    }

    pub fn is_codeword(&self, bits: &[u8]) -> bool {
        bits.len() == self.n && self.syndrome_unchecked(bits).iter().all(|&b| b == 0)
    }
}

fn check_bits(bits: &[u8], expected: usize) -> Result<()> {
    if bits.len() != expected {
        return Err(CodeError::Length {
            expected,
            got: bits.len(),
        });
    }
    if let Some((index, &value)) = bits.iter().enumerate().find(|(_, &b)| b > 1) {
        return Err(CodeError::NotABit { index, value });
    }
    Ok(())
}

/// The (7,4) Hamming code used throughout the tests.
pub fn hamming74() -> CodeSpec {
    CodeSpec::from_matrix(
        "hamming7_4",
        BitMatrix::from_rows(&[
            [1, 0, 1, 0, 1, 0, 1],
            [0, 1, 1, 0, 0, 1, 1],
            [0, 0, 0, 1, 1, 1, 1],
        ]),
    )
    .expect("Hamming(7,4) is full rank")
}
