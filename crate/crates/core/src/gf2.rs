//! GF(2) linear-code machinery.
//!
//! A binary linear code is described by its parity-check matrix `H`
//! ((n-k) x n). Everything the decoders need about code structure is derived
//! from it here: syndromes, a generator matrix for random-codeword
//! simulation, and the two structural masks consumed by the neural decoder.
//!
//! Bits are stored as `u8` holding 0 or 1.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodeError {
    #[error("alist parse error at token {token}: {msg}")]
    Parse { token: usize, msg: String },
    #[error("parity-check matrix has GF(2) rank {rank}, expected full row rank {rows}")]
    RankDeficient { rank: usize, rows: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("entry {value} at ({row}, {col}) is not a bit")]
    NotBinary { row: usize, col: usize, value: u8 },
    #[error("unknown code '{0}'")]
    UnknownCode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major binary matrix.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn identity(size: usize) -> Self {
        let mut m = Self::zeros(size, size);
        for i in 0..size {
            m.set(i, i, 1);
        }
        m
    }

    /// Builds a matrix from row slices; every entry must be 0 or 1.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self, CodeError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(CodeError::LengthMismatch {
                    expected: cols,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(CodeError::NotBinary {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.cols + c] = v & 1;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Reverses the row order (used for the backward scan direction).
    pub fn reverse_rows(&self) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let src = self.rows - 1 - r;
            out.data[r * self.cols..(r + 1) * self.cols].copy_from_slice(self.row(src));
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Matrix-vector product over GF(2).
    pub fn mul_vec(&self, v: &[u8]) -> Result<Vec<u8>, CodeError> {
        if v.len() != self.cols {
            return Err(CodeError::LengthMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(v)
                    .fold(0u8, |acc, (&h, &x)| acc ^ (h & x))
            })
            .collect())
    }

    /// Matrix product over GF(2).
    pub fn mul(&self, other: &BinaryMatrix) -> Result<BinaryMatrix, CodeError> {
        if self.cols != other.rows {
            return Err(CodeError::LengthMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                if self.get(i, k) == 1 {
                    for j in 0..other.cols {
                        let v = out.get(i, j) ^ other.get(k, j);
                        out.set(i, j, v);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    /// Rank over GF(2).
    pub fn rank(&self) -> usize {
        reduce(self).pivots.len()
    }
}

impl fmt::Debug for BinaryMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            let line: String = self.row(r).iter().map(|&b| char::from(b'0' + b)).collect();
            writeln!(f, "  {line}")?;
        }
        write!(f, "]")
    }
}

struct Reduced {
    /// Reduced row echelon form, same shape as the input.
    rref: BinaryMatrix,
    /// Pivot column of each non-zero row, in row order.
    pivots: Vec<usize>,
}

/// Gauss-Jordan elimination over GF(2) with column pivot tracking.
fn reduce(m: &BinaryMatrix) -> Reduced {
    let mut a = m.clone();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..a.cols {
        if row == a.rows {
            break;
        }
        let Some(p) = (row..a.rows).find(|&r| a.get(r, col) == 1) else {
            continue;
        };
        if p != row {
            for c in 0..a.cols {
                a.data.swap(p * a.cols + c, row * a.cols + c);
            }
        }
        for r in 0..a.rows {
            if r != row && a.get(r, col) == 1 {
                for c in col..a.cols {
                    let v = a.get(r, c) ^ a.get(row, c);
                    a.set(r, c, v);
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    Reduced { rref: a, pivots }
}

/// A validated full-row-rank parity-check matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParityCheckMatrix {
    h: BinaryMatrix,
    name: String,
}

impl ParityCheckMatrix {
    /// Validates `h` (full row rank over GF(2), at least one row) and wraps it.
    /// Rank-deficient matrices are rejected rather than reduced.
    pub fn new(h: BinaryMatrix, name: impl Into<String>) -> Result<Self, CodeError> {
        let rank = h.rank();
        if h.rows() == 0 || h.rows() >= h.cols() || rank != h.rows() {
            return Err(CodeError::RankDeficient {
                rank,
                rows: h.rows(),
            });
        }
        Ok(Self {
            h,
            name: name.into(),
        })
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R], name: &str) -> Result<Self, CodeError> {
        Self::new(BinaryMatrix::from_rows(rows)?, name)
    }

    /// The canonical Hamming(7,4) code.
    pub fn hamming_7_4() -> Self {
        Self::from_rows(
            &[
                [1, 1, 1, 0, 1, 0, 0],
                [1, 1, 0, 1, 0, 1, 0],
                [1, 0, 1, 1, 0, 0, 1],
            ],
            "hamming_7_4",
        )
        .expect("hamming(7,4) is full rank")
    }

    pub fn matrix(&self) -> &BinaryMatrix {
        &self.h
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Code length.
    pub fn n(&self) -> usize {
        self.h.cols()
    }

    /// Code dimension.
    pub fn k(&self) -> usize {
        self.h.cols() - self.h.rows()
    }

    /// Number of parity checks, n - k.
    pub fn checks(&self) -> usize {
        self.h.rows()
    }

    /// Decoder sequence length 2n - k.
    pub fn seq_len(&self) -> usize {
        self.n() + self.checks()
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n() as f64
    }

    pub fn row_weights(&self) -> Vec<usize> {
        (0..self.checks())
            .map(|r| self.h.row(r).iter().filter(|&&b| b == 1).count())
            .collect()
    }

    /// s = H w over GF(2).
    pub fn syndrome(&self, word: &[u8]) -> Result<Vec<u8>, CodeError> {
        self.h.mul_vec(word)
    }

    pub fn is_codeword(&self, word: &[u8]) -> Result<bool, CodeError> {
        Ok(self.syndrome(word)?.iter().all(|&b| b == 0))
    }

    /// The attention mask g(H):
    ///
    /// ```text
    /// [ Graph(H)  H^T     ]
    /// [ H         I_{n-k} ]
    /// ```
    ///
    /// where `Graph(H)[i, j] = 1` iff bits i and j share a parity check.
    pub fn attention_mask(&self) -> AttentionMask {
        let (n, m) = (self.n(), self.checks());
        let mut g = BinaryMatrix::zeros(n + m, n + m);
        for r in 0..m {
            let support: Vec<usize> = (0..n).filter(|&c| self.h.get(r, c) == 1).collect();
            for &i in &support {
                for &j in &support {
                    g.set(i, j, 1);
                }
                g.set(i, n + r, 1);
                g.set(n + r, i, 1);
            }
            g.set(n + r, n + r, 1);
        }
        AttentionMask(g)
    }

    /// The participation mask f(H), stored as L x (n-k): row `l` flags the
    /// checks that sequence position `l` takes part in. Rows `0..n` are the
    /// columns of H, rows `n..L` the identity.
    pub fn participation_mask(&self) -> ParticipationMask {
        let (n, m) = (self.n(), self.checks());
        let mut f = BinaryMatrix::zeros(n + m, m);
        for l in 0..n {
            for j in 0..m {
                f.set(l, j, self.h.get(j, l));
            }
        }
        for j in 0..m {
            f.set(n + j, j, 1);
        }
        ParticipationMask(f)
    }

    /// A k x n generator matrix with `G H^T = 0`, built from the reduced row
    /// echelon form of H: one basis codeword per non-pivot column.
    pub fn generator_matrix(&self) -> Result<BinaryMatrix, CodeError> {
        let Reduced { rref, pivots } = reduce(&self.h);
        if pivots.len() != self.checks() {
            return Err(CodeError::RankDeficient {
                rank: pivots.len(),
                rows: self.checks(),
            });
        }
        let n = self.n();
        let free: Vec<usize> = (0..n).filter(|c| !pivots.contains(c)).collect();
        let mut g = BinaryMatrix::zeros(free.len(), n);
        for (i, &f) in free.iter().enumerate() {
            g.set(i, f, 1);
            for (r, &p) in pivots.iter().enumerate() {
                g.set(i, p, rref.get(r, f));
            }
        }
        Ok(g)
    }
}

/// w = u G over GF(2).
pub fn encode(generator: &BinaryMatrix, message: &[u8]) -> Result<Vec<u8>, CodeError> {
    if message.len() != generator.rows() {
        return Err(CodeError::LengthMismatch {
            expected: generator.rows(),
            got: message.len(),
        });
    }
    let mut word = vec![0u8; generator.cols()];
    for (r, _) in message.iter().enumerate().filter(|(_, &b)| b == 1) {
        for (w, &g) in word.iter_mut().zip(generator.row(r)) {
            *w ^= g;
        }
    }
    Ok(word)
}

/// Symmetric L x L mask used by the attention layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask(pub BinaryMatrix);

impl AttentionMask {
    pub fn matrix(&self) -> &BinaryMatrix {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }
}

/// L x (n-k) mask used by the selective-scan layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParticipationMask(pub BinaryMatrix);

impl ParticipationMask {
    pub fn matrix(&self) -> &BinaryMatrix {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_graph(h: &ParityCheckMatrix) -> BinaryMatrix {
        let n = h.n();
        let mut g = BinaryMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                for m in 0..h.checks() {
                    if h.matrix().get(m, i) == 1 && h.matrix().get(m, j) == 1 {
                        g.set(i, j, 1);
                    }
                }
            }
        }
        g
    }

    #[test]
    fn hamming_dimensions() {
        let h = ParityCheckMatrix::hamming_7_4();
        assert_eq!((h.n(), h.k(), h.checks(), h.seq_len()), (7, 4, 3, 10));
        assert_eq!(h.row_weights(), vec![4, 4, 4]);
    }

    #[test]
    fn single_flip_syndrome_is_column() {
        let h = ParityCheckMatrix::hamming_7_4();
        for i in 0..7 {
            let mut w = vec![0u8; 7];
            w[i] = 1;
            let col: Vec<u8> = (0..3).map(|r| h.matrix().get(r, i)).collect();
            assert_eq!(h.syndrome(&w).unwrap(), col);
        }
        let mut e1 = vec![0u8; 7];
        e1[0] = 1;
        assert_eq!(h.syndrome(&e1).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn syndrome_length_mismatch() {
        let h = ParityCheckMatrix::hamming_7_4();
        assert!(matches!(
            h.syndrome(&[0, 1]),
            Err(CodeError::LengthMismatch { expected: 7, got: 2 })
        ));
    }

    #[test]
    fn rejects_rank_deficient() {
        let err = ParityCheckMatrix::from_rows(&[[1, 1, 0, 0], [1, 1, 0, 0]], "dup").unwrap_err();
        assert!(matches!(err, CodeError::RankDeficient { rank: 1, rows: 2 }));
    }

    #[test]
    fn attention_mask_matches_brute_force() {
        let h = ParityCheckMatrix::hamming_7_4();
        let g = h.attention_mask();
        let gm = g.matrix();
        assert!(gm.is_symmetric());
        let graph = brute_graph(&h);
        let (n, m) = (7, 3);
        for i in 0..n + m {
            assert_eq!(gm.get(i, i), 1);
            for j in 0..n + m {
                let expected = match (i < n, j < n) {
                    (true, true) => graph.get(i, j),
                    (true, false) => h.matrix().get(j - n, i),
                    (false, true) => h.matrix().get(i - n, j),
                    (false, false) => u8::from(i == j),
                };
                assert_eq!(gm.get(i, j), expected, "({i},{j})");
            }
        }
    }

    #[test]
    fn all_ones_row_gives_full_graph() {
        let h = ParityCheckMatrix::from_rows(&[[1, 1, 1, 1]], "rep").unwrap();
        let g = h.attention_mask();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.matrix().get(i, j), 1);
            }
        }
    }

    #[test]
    fn disjoint_rows_give_block_diagonal_graph() {
        let h =
            ParityCheckMatrix::from_rows(&[[1, 1, 0, 0, 0], [0, 0, 1, 1, 0]], "blocks").unwrap();
        let g = h.attention_mask();
        let expect = [
            [1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [0, 0, 1, 1, 0],
            [0, 0, 1, 1, 0],
            [0, 0, 0, 0, 0],
        ];
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(g.matrix().get(i, j), expect[i][j], "({i},{j})");
            }
        }
    }

    #[test]
    fn participation_mask_layout() {
        let h = ParityCheckMatrix::hamming_7_4();
        let f = h.participation_mask();
        let fm = f.matrix();
        assert_eq!((fm.rows(), fm.cols()), (10, 3));
        assert_eq!(fm.row(0), &[1, 1, 1]);
        for l in 0..7 {
            for j in 0..3 {
                assert_eq!(fm.get(l, j), h.matrix().get(j, l));
            }
        }
        for l in 7..10 {
            for j in 0..3 {
                assert_eq!(fm.get(l, j), u8::from(j == l - 7));
            }
        }
        let weights = h.row_weights();
        for j in 0..3 {
            let col_sum: usize = (0..10).map(|l| fm.get(l, j) as usize).sum();
            assert_eq!(col_sum, weights[j] + 1);
        }
    }

    #[test]
    fn hamming_codebook_enumeration() {
        let h = ParityCheckMatrix::hamming_7_4();
        let g = h.generator_matrix().unwrap();
        assert_eq!((g.rows(), g.cols()), (4, 7));
        assert_eq!(g.rank(), 4);
        let mut words = std::collections::HashSet::new();
        for u in 0..16u32 {
            let msg: Vec<u8> = (0..4).map(|i| ((u >> i) & 1) as u8).collect();
            let w = encode(&g, &msg).unwrap();
            assert!(h.is_codeword(&w).unwrap());
            words.insert(w);
        }
        assert_eq!(words.len(), 16);
    }

    #[test]
    fn encode_basis_and_zero() {
        let h = ParityCheckMatrix::hamming_7_4();
        let g = h.generator_matrix().unwrap();
        assert_eq!(encode(&g, &[0; 4]).unwrap(), vec![0; 7]);
        for i in 0..4 {
            let mut u = vec![0u8; 4];
            u[i] = 1;
            assert_eq!(encode(&g, &u).unwrap(), g.row(i));
        }
        assert!(encode(&g, &[1, 0]).is_err());
    }

    fn random_full_rank() -> impl Strategy<Value = ParityCheckMatrix> {
        (2usize..6, 3usize..10)
            .prop_flat_map(|(m, extra)| {
                let n = m + extra;
                prop::collection::vec(prop::collection::vec(0u8..2, n), m)
            })
            .prop_filter_map("full rank", |rows| {
                ParityCheckMatrix::from_rows(&rows, "random").ok()
            })
    }

    proptest! {
        #[test]
        fn generator_is_orthogonal(h in random_full_rank()) {
            let g = h.generator_matrix().unwrap();
            prop_assert_eq!(g.rows(), h.k());
            prop_assert_eq!(g.rank(), h.k());
            prop_assert!(g.mul(&h.matrix().transpose()).unwrap().is_zero());
        }

        #[test]
        fn every_codeword_has_zero_syndrome(h in random_full_rank()) {
            let g = h.generator_matrix().unwrap();
            for u in 0u32..(1 << h.k()) {
                let msg: Vec<u8> = (0..h.k()).map(|i| ((u >> i) & 1) as u8).collect();
                let w = encode(&g, &msg).unwrap();
                prop_assert!(h.is_codeword(&w).unwrap());
            }
        }

        #[test]
        fn masks_are_structurally_consistent(h in random_full_rank()) {
            let g = h.attention_mask();
            prop_assert!(g.matrix().is_symmetric());
            let f = h.participation_mask();
            for l in 0..h.n() {
                for j in 0..h.checks() {
                    prop_assert_eq!(f.matrix().get(l, j), h.matrix().get(j, l));
                }
            }
        }
    }
}
