//! Reader and writer for the alist sparse-matrix text format.
//!
//! ```text
//! n m
//! max_col_degree max_row_degree
//! <n column degrees>
//! <m row degrees>
//! <n lines: 1-based row indices of each column, zero padded>
//! <m lines: 1-based column indices of each row, zero padded>
//! ```
//!
//! The row-list section is optional on input; when present it must agree
//! with the column lists.

use std::path::Path;

use crate::gf2::{BinaryMatrix, CodeError, ParityCheckMatrix};

struct Tokens<'a> {
    inner: std::iter::Enumerate<std::str::SplitWhitespace<'a>>,
    last: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.split_whitespace().enumerate(),
            last: 0,
        }
    }

    fn next_usize(&mut self, what: &str) -> Result<usize, CodeError> {
        let (i, tok) = self.inner.next().ok_or_else(|| CodeError::Parse {
            token: self.last + 1,
            msg: format!("unexpected end of input, expected {what}"),
        })?;
        self.last = i;
        tok.parse().map_err(|_| CodeError::Parse {
            token: i,
            msg: format!("'{tok}' is not a non-negative integer ({what})"),
        })
    }

    fn at_end(&mut self) -> bool {
        self.inner.clone().next().is_none()
    }

    fn err(&self, msg: String) -> CodeError {
        CodeError::Parse {
            token: self.last,
            msg,
        }
    }
}

/// Parses alist text into a binary matrix (no rank validation).
pub fn parse_matrix(text: &str) -> Result<BinaryMatrix, CodeError> {
    let mut t = Tokens::new(text);
    let n = t.next_usize("n")?;
    let m = t.next_usize("m")?;
    if n == 0 || m == 0 {
        return Err(t.err("matrix dimensions must be positive".into()));
    }
    let max_col = t.next_usize("max column degree")?;
    let max_row = t.next_usize("max row degree")?;
    let col_deg = (0..n)
        .map(|_| t.next_usize("column degree"))
        .collect::<Result<Vec<_>, _>>()?;
    let row_deg = (0..m)
        .map(|_| t.next_usize("row degree"))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(&d) = col_deg.iter().find(|&&d| d > max_col) {
        return Err(t.err(format!("column degree {d} exceeds declared maximum {max_col}")));
    }
    if let Some(&d) = row_deg.iter().find(|&&d| d > max_row) {
        return Err(t.err(format!("row degree {d} exceeds declared maximum {max_row}")));
    }

    let mut h = BinaryMatrix::zeros(m, n);
    for (col, &deg) in col_deg.iter().enumerate() {
        let mut seen = 0;
        for _ in 0..max_col {
            let idx = t.next_usize("row index")?;
            if idx == 0 {
                continue;
            }
            if idx > m {
                return Err(t.err(format!("row index {idx} exceeds m = {m}")));
            }
            h.set(idx - 1, col, 1);
            seen += 1;
        }
        if seen != deg {
            return Err(t.err(format!(
                "column {} lists {seen} entries, degree says {deg}",
                col + 1
            )));
        }
    }

    if t.at_end() {
        return Ok(h);
    }
    for (row, &deg) in row_deg.iter().enumerate() {
        let mut seen = 0;
        for _ in 0..max_row {
            let idx = t.next_usize("column index")?;
            if idx == 0 {
                continue;
            }
            if idx > n {
                return Err(t.err(format!("column index {idx} exceeds n = {n}")));
            }
            if h.get(row, idx - 1) != 1 {
                return Err(t.err(format!(
                    "row {} lists column {idx}, absent from the column lists",
                    row + 1
                )));
            }
            seen += 1;
        }
        if seen != deg {
            return Err(t.err(format!(
                "row {} lists {seen} entries, degree says {deg}",
                row + 1
            )));
        }
    }
    if !t.at_end() {
        return Err(t.err("trailing tokens after row lists".into()));
    }
    Ok(h)
}

/// Parses and validates a parity-check matrix.
pub fn parse(text: &str, name: &str) -> Result<ParityCheckMatrix, CodeError> {
    ParityCheckMatrix::new(parse_matrix(text)?, name)
}

/// Loads an alist file; the code is named after the file stem.
pub fn load_alist(path: impl AsRef<Path>) -> Result<ParityCheckMatrix, CodeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse(&text, &name)
}

pub fn to_alist(h: &BinaryMatrix) -> String {
    let (m, n) = (h.rows(), h.cols());
    let cols: Vec<Vec<usize>> = (0..n)
        .map(|c| (0..m).filter(|&r| h.get(r, c) == 1).map(|r| r + 1).collect())
        .collect();
    let rows: Vec<Vec<usize>> = (0..m)
        .map(|r| (0..n).filter(|&c| h.get(r, c) == 1).map(|c| c + 1).collect())
        .collect();
    let max_col = cols.iter().map(Vec::len).max().unwrap_or(0);
    let max_row = rows.iter().map(Vec::len).max().unwrap_or(0);

    let join = |v: &mut dyn Iterator<Item = usize>| {
        v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
    };
    let mut out = format!("{n} {m}\n{max_col} {max_row}\n");
    out += &join(&mut cols.iter().map(Vec::len));
    out.push('\n');
    out += &join(&mut rows.iter().map(Vec::len));
    out.push('\n');
    for (list, width) in cols.iter().map(|c| (c, max_col)).chain(rows.iter().map(|r| (r, max_row))) {
        let padded = list.iter().copied().chain(std::iter::repeat(0)).take(width);
        out += &join(&mut padded.into_iter());
        out.push('\n');
    }
    out
}
