//! Sparse matrix support: a checked CSC representation, block-wise
//! coarsening of the sparsity structure, deterministic seeded synthesis,
//! and a Matrix Market coordinate-format reader.
//!
//! Structural nonzeros may carry the value 0: blockification fills a
//! touched block with structurally-present zero entries, which coarsens
//! the access pattern without changing any numerical result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::BufRead;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("colptr must have cols+1 entries (got {got}, cols {cols})")]
    ColPtrLen { got: usize, cols: usize },
    #[error("colptr not non-decreasing at column {0}")]
    ColPtrOrder(usize),
    #[error("colptr[0] must be 0")]
    ColPtrStart,
    #[error("colptr[cols]={end} does not match nnz {nnz}")]
    ColPtrEnd { end: usize, nnz: usize },
    #[error("row indices not strictly increasing within column {0}")]
    RowOrder(usize),
    #[error("row index {row} out of bounds ({rows} rows)")]
    RowRange { row: usize, rows: usize },
    #[error("rowidx/values length mismatch ({rowidx} vs {values})")]
    LenMismatch { rowidx: usize, values: usize },
    #[error("block size {0} must be a power of two in 1..=16")]
    BadBlockSize(usize),
    #[error("sparsity {0} must lie in [0,1)")]
    BadSparsity(f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum MatrixMarketError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: entry ({row}, {col}) outside {rows}x{cols}")]
    OutOfRange {
        line: usize,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("line {line}: duplicate coordinate ({row}, {col})")]
    Duplicate { line: usize, row: usize, col: usize },
    #[error("expected {expected} entries, found {found}")]
    EntryCount { expected: usize, found: usize },
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Invalid(#[from] SparseError),
}

/// Compressed Sparse Column matrix with int8 values. Invariants are
/// enforced by the constructor: `colptr` is non-decreasing with
/// `colptr[0] = 0` and `colptr[cols] = nnz`, and row indices are
/// strictly increasing within each column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CscMatrix {
    rows: usize,
    cols: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<i8>,
}

impl CscMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        colptr: Vec<usize>,
        rowidx: Vec<usize>,
        values: Vec<i8>,
    ) -> Result<Self, SparseError> {
        if colptr.len() != cols + 1 {
            return Err(SparseError::ColPtrLen {
                got: colptr.len(),
                cols,
            });
        }
        if colptr[0] != 0 {
            return Err(SparseError::ColPtrStart);
        }
        for c in 0..cols {
            if colptr[c] > colptr[c + 1] {
                return Err(SparseError::ColPtrOrder(c));
            }
        }
        if rowidx.len() != values.len() {
            return Err(SparseError::LenMismatch {
                rowidx: rowidx.len(),
                values: values.len(),
            });
        }
        if colptr[cols] != rowidx.len() {
            return Err(SparseError::ColPtrEnd {
                end: colptr[cols],
                nnz: rowidx.len(),
            });
        }
        for c in 0..cols {
            let span = &rowidx[colptr[c]..colptr[c + 1]];
            for (i, &r) in span.iter().enumerate() {
                if r >= rows {
                    return Err(SparseError::RowRange { row: r, rows });
                }
                if i > 0 && span[i - 1] >= r {
                    return Err(SparseError::RowOrder(c));
                }
            }
        }
        Ok(CscMatrix {
            rows,
            cols,
            colptr,
            rowidx,
            values,
        })
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        CscMatrix {
            rows,
            cols,
            colptr: vec![0; cols + 1],
            rowidx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.rowidx.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    /// Row indices and values of one column, in increasing row order.
    pub fn column(&self, col: usize) -> (&[usize], &[i8]) {
        let span = self.colptr[col]..self.colptr[col + 1];
        (&self.rowidx[span.clone()], &self.values[span])
    }

    /// Iterates structural nonzeros in column-major order as (row, col, value).
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, i8)> + '_ {
        (0..self.cols).flat_map(move |c| {
            let (rows, vals) = self.column(c);
            rows.iter().zip(vals).map(move |(&r, &v)| (r, c, v))
        })
    }

    /// Exact sparse encoding of a dense row-major grid; zeros are dropped.
    pub fn from_dense(rows: usize, cols: usize, dense: &[i8]) -> Self {
        assert_eq!(dense.len(), rows * cols);
        let mut colptr = Vec::with_capacity(cols + 1);
        let mut rowidx = Vec::new();
        let mut values = Vec::new();
        colptr.push(0);
        for c in 0..cols {
            for r in 0..rows {
                let v = dense[r * cols + c];
                if v != 0 {
                    rowidx.push(r);
                    values.push(v);
                }
            }
            colptr.push(rowidx.len());
        }
        CscMatrix {
            rows,
            cols,
            colptr,
            rowidx,
            values,
        }
    }

    /// Dense row-major expansion. Structural zeros expand to 0, so this
    /// is only a value round-trip, not a structural one.
    pub fn to_dense(&self) -> Vec<i8> {
        let mut dense = vec![0i8; self.rows * self.cols];
        for (r, c, v) in self.iter() {
            dense[r * self.cols + c] = v;
        }
        dense
    }

    /// The structural nonzero set as a dense boolean mask (row-major).
    pub fn structure_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.rows * self.cols];
        for (r, c, _) in self.iter() {
            mask[r * self.cols + c] = true;
        }
        mask
    }

    /// Zero-pads the dimensions; padding never adds nonzeros.
    pub fn pad_to(&self, rows: usize, cols: usize) -> CscMatrix {
        assert!(rows >= self.rows && cols >= self.cols);
        let mut colptr = self.colptr.clone();
        colptr.resize(cols + 1, self.nnz());
        CscMatrix {
            rows,
            cols,
            colptr,
            rowidx: self.rowidx.clone(),
            values: self.values.clone(),
        }
    }
}

/// Block edge length used to coarsen a sparsity structure. Must be a
/// power of two in 1..=16; dimensions are zero-padded up to a multiple
/// of the block size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockifySpec {
    block: usize,
}

impl BlockifySpec {
    pub fn new(block: usize) -> Result<Self, SparseError> {
        if block == 0 || block > 16 || !block.is_power_of_two() {
            return Err(SparseError::BadBlockSize(block));
        }
        Ok(BlockifySpec { block })
    }

    pub fn block(&self) -> usize {
        self.block
    }
}

/// Coarsens the structure to B x B blocks: the output has a structural
/// nonzero at (i, j) iff the input has at least one nonzero anywhere in
/// block (i/B, j/B). Original values are kept; fill positions carry
/// value 0 but are structurally present. B = 1 is the identity.
pub fn blockify(m: &CscMatrix, spec: BlockifySpec) -> CscMatrix {
    let b = spec.block();
    if b == 1 {
        return m.clone();
    }
    let rows = m.rows().div_ceil(b) * b;
    let cols = m.cols().div_ceil(b) * b;
    let brows = rows / b;
    let bcols = cols / b;
    let mut block_set = vec![false; brows * bcols];
    for (r, c, _) in m.iter() {
        block_set[(r / b) * bcols + c / b] = true;
    }
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowidx = Vec::new();
    let mut values = Vec::new();
    colptr.push(0);
    for c in 0..cols {
        let bc = c / b;
        let (orig_rows, orig_vals) = if c < m.cols() {
            m.column(c)
        } else {
            (&[][..], &[][..])
        };
        let mut cursor = 0;
        for br in 0..brows {
            if !block_set[br * bcols + bc] {
                continue;
            }
            for r in br * b..(br + 1) * b {
                while cursor < orig_rows.len() && orig_rows[cursor] < r {
                    cursor += 1;
                }
                let v = if cursor < orig_rows.len() && orig_rows[cursor] == r {
                    orig_vals[cursor]
                } else {
                    0
                };
                rowidx.push(r);
                values.push(v);
            }
        }
        colptr.push(rowidx.len());
    }
    CscMatrix {
        rows,
        cols,
        colptr,
        rowidx,
        values,
    }
}

/// Deterministic synthetic sparsity: each cell is independently nonzero
/// with probability `1 - sparsity`, values uniform over the nonzero int8
/// range. Identical (dims, sparsity, seed) always produce the same
/// matrix.
pub fn synth_sparse(
    rows: usize,
    cols: usize,
    sparsity: f64,
    seed: u64,
) -> Result<CscMatrix, SparseError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(SparseError::BadSparsity(sparsity));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = 1.0 - sparsity;
    // Column-major walk so the CSC arrays build up in order.
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowidx = Vec::new();
    let mut values = Vec::new();
    colptr.push(0);
    for _ in 0..cols {
        for r in 0..rows {
            if rng.gen::<f64>() < density {
                let mut v: i8 = rng.gen_range(-127..=126);
                if v >= 0 {
                    v += 1; // skip zero, keep the range symmetric
                }
                rowidx.push(r);
                values.push(v);
            }
        }
        colptr.push(rowidx.len());
    }
    Ok(CscMatrix {
        rows,
        cols,
        colptr,
        rowidx,
        values,
    })
}

/// Deterministic dense int8 operand, row-major.
pub fn synth_dense(rows: usize, cols: usize, seed: u64) -> Vec<i8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.gen()).collect()
}

/// Reads a Matrix Market coordinate-format stream (real, integer or
/// pattern fields; general or symmetric). Pattern entries get value 1;
/// real/integer values are rounded and clamped into int8. Duplicate
/// coordinates are rejected; errors carry the offending line number.
pub fn read_matrix_market<R: BufRead>(reader: R) -> Result<CscMatrix, MatrixMarketError> {
    let mut lines = reader.lines().enumerate();
    let malformed = |line: usize, msg: &str| MatrixMarketError::Malformed {
        line,
        msg: msg.to_string(),
    };

    let (lineno, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty stream"))?;
    let header = header.map_err(|e| MatrixMarketError::Io(e.to_string()))?;
    let line1 = lineno + 1;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 5 || !fields[0].eq_ignore_ascii_case("%%MatrixMarket") {
        return Err(malformed(line1, "expected '%%MatrixMarket matrix coordinate <field> <symmetry>'"));
    }
    if !fields[1].eq_ignore_ascii_case("matrix") || !fields[2].eq_ignore_ascii_case("coordinate") {
        return Err(malformed(line1, "only 'matrix coordinate' objects are supported"));
    }
    let pattern = match fields[3].to_ascii_lowercase().as_str() {
        "real" | "integer" => false,
        "pattern" => true,
        other => return Err(malformed(line1, &format!("unsupported field type '{other}'"))),
    };
    let symmetric = match fields[4].to_ascii_lowercase().as_str() {
        "general" => false,
        "symmetric" => true,
        other => {
            return Err(malformed(
                line1,
                &format!("unsupported symmetry '{other}'"),
            ))
        }
    };

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut entries: Vec<(usize, usize, i8, usize)> = Vec::new();
    let mut declared = 0usize;
    let mut file_entries = 0usize;
    for (lineno, text) in lines {
        let line = lineno + 1;
        let text = text.map_err(|e| MatrixMarketError::Io(e.to_string()))?;
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if dims.is_none() {
            if toks.len() != 3 {
                return Err(malformed(line, "expected 'rows cols nnz'"));
            }
            let parse = |t: &str| -> Result<usize, MatrixMarketError> {
                t.parse().map_err(|_| malformed(line, "bad dimension"))
            };
            let (r, c, n) = (parse(toks[0])?, parse(toks[1])?, parse(toks[2])?);
            dims = Some((r, c, n));
            declared = n;
            continue;
        }
        let (rows, cols, _) = dims.unwrap();
        let want = if pattern { 2 } else { 3 };
        if toks.len() != want {
            return Err(malformed(line, "wrong entry arity"));
        }
        let r: usize = toks[0]
            .parse()
            .map_err(|_| malformed(line, "bad row index"))?;
        let c: usize = toks[1]
            .parse()
            .map_err(|_| malformed(line, "bad column index"))?;
        if r < 1 || r > rows || c < 1 || c > cols {
            return Err(MatrixMarketError::OutOfRange {
                line,
                row: r,
                col: c,
                rows,
                cols,
            });
        }
        let value: i8 = if pattern {
            1
        } else {
            let v: f64 = toks[2]
                .parse()
                .map_err(|_| malformed(line, "bad value"))?;
            v.round().clamp(-127.0, 127.0) as i8
        };
        let (r0, c0) = (r - 1, c - 1);
        file_entries += 1;
        entries.push((r0, c0, value, line));
        if symmetric && r0 != c0 {
            entries.push((c0, r0, value, line));
        }
    }
    let (rows, cols, _) = dims.ok_or_else(|| malformed(0, "missing size line"))?;
    if file_entries != declared {
        return Err(MatrixMarketError::EntryCount {
            expected: declared,
            found: file_entries,
        });
    }

    entries.sort_by_key(|&(r, c, _, _)| (c, r));
    for w in entries.windows(2) {
        if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
            return Err(MatrixMarketError::Duplicate {
                line: w[0].3.max(w[1].3),
                row: w[0].0 + 1,
                col: w[0].1 + 1,
            });
        }
    }
    let mut colptr = vec![0usize; cols + 1];
    for &(_, c, _, _) in &entries {
        colptr[c + 1] += 1;
    }
    for c in 0..cols {
        colptr[c + 1] += colptr[c];
    }
    let rowidx = entries.iter().map(|&(r, _, _, _)| r).collect();
    let values = entries.iter().map(|&(_, _, v, _)| v).collect();
    Ok(CscMatrix::new(rows, cols, colptr, rowidx, values)?)
}
