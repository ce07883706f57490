//! Embedding tables: id → dense vector, with sparse gradient accumulation.
//!
//! Id 0 of every vocabulary is reserved for padding. Its row is zero at
//! initialization and the model never routes gradient into it, so it stays
//! zero for the lifetime of the table.
//!
//! Weights are stored one row per id (`K × n_E`), so a lookup is a
//! contiguous slice.
//!
//! # Weights file
//!
//! ```text
//! dien-embedding v1
//! <vocab_size> <dim>
//! <dim values of row 0, space separated>
//! ...
//! <dim values of row vocab_size-1>
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so save/load is
//! bit-exact.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix, Vector};

pub const PADDING_ID: usize = 0;

const TABLE_MAGIC: &str = "dien-embedding v1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    weights: Matrix,
    grads: BTreeMap<usize, Vec<f64>>,
}

impl EmbeddingTable {
    /// Uniform init in `[-1/√dim, 1/√dim]`, padding row zeroed.
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::config(format!(
                "embedding table needs positive vocab and dim, got {vocab_size}x{dim}"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut data: Vec<f64> = (0..vocab_size * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        data[..dim].iter_mut().for_each(|v| *v = 0.0);
        Ok(EmbeddingTable {
            weights: Matrix::new(vocab_size, dim, data)?,
            grads: BTreeMap::new(),
        })
    }

    pub fn from_weights(weights: Matrix) -> Self {
        EmbeddingTable {
            weights,
            grads: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.vocab_size() {
            return Err(Error::Vocabulary {
                id,
                size: self.vocab_size(),
            });
        }
        Ok(())
    }

    pub fn lookup(&self, id: usize) -> Result<Vector> {
        Ok(Vector::from_vec(self.row(id)?.to_vec()))
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        self.check_id(id)?;
        Ok(self.weights.row(id))
    }

    pub fn accumulate_grad(&mut self, id: usize, grad: &[f64]) -> Result<()> {
        self.check_id(id)?;
        if grad.len() != self.dim() {
            return Err(Error::shape(format!(
                "gradient of length {} for embedding dim {}",
                grad.len(),
                self.dim()
            )));
        }
        let dim = self.dim();
        let slot = self.grads.entry(id).or_insert_with(|| vec![0.0; dim]);
        axpy(1.0, grad, slot);
        Ok(())
    }

    /// Accumulated gradients keyed by id, in ascending id order.
    pub fn accumulated(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.grads
    }

    pub fn take_grads(&mut self) -> BTreeMap<usize, Vec<f64>> {
        std::mem::take(&mut self.grads)
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{TABLE_MAGIC}")?;
        writeln!(out, "{} {}", self.vocab_size(), self.dim())?;
        for r in 0..self.vocab_size() {
            write_row(out, self.weights.row(r))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: &mut LineReader<R>) -> Result<Self> {
        input.expect_line(TABLE_MAGIC)?;
        let header = input.next_values::<usize>()?;
        let [vocab, dim] = header[..] else {
            return Err(input.error("expected `<vocab_size> <dim>`"));
        };
        let mut data = Vec::with_capacity(vocab * dim);
        for _ in 0..vocab {
            let row = input.next_values::<f64>()?;
            if row.len() != dim {
                return Err(input.error(format!("expected {dim} values, found {}", row.len())));
            }
            data.extend(row);
        }
        Ok(EmbeddingTable::from_weights(Matrix::new(vocab, dim, data)?))
    }
}

pub(crate) fn write_row<W: Write>(out: &mut W, row: &[f64]) -> std::io::Result<()> {
    let mut first = true;
    for v in row {
        if !first {
            out.write_all(b" ")?;
        }
        first = false;
        write!(out, "{v:?}")?;
    }
    out.write_all(b"\n")
}

/// Line-oriented reader shared by the weights and checkpoint formats.
pub struct LineReader<R> {
    inner: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> LineReader<R> {
    pub fn new(inner: R) -> Self {
        LineReader {
            inner,
            line_no: 0,
            buf: String::new(),
        }
    }

    pub(crate) fn error(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            column: 1,
            reason: reason.into(),
        }
    }

    pub fn next_line(&mut self) -> Result<Option<&str>> {
        self.buf.clear();
        let n = self
            .inner
            .read_line(&mut self.buf)
            .map_err(|e| Error::Parse {
                line: self.line_no + 1,
                column: 1,
                reason: e.to_string(),
            })?;
        if n == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        Ok(Some(self.buf.trim_end_matches(['\n', '\r'])))
    }

    pub(crate) fn require_line(&mut self) -> Result<String> {
        match self.next_line()? {
            Some(l) => Ok(l.to_string()),
            None => Err(Error::Parse {
                line: self.line_no + 1,
                column: 1,
                reason: "unexpected end of file".into(),
            }),
        }
    }

    pub(crate) fn expect_line(&mut self, want: &str) -> Result<()> {
        let got = self.require_line()?;
        if got != want {
            return Err(self.error(format!("expected `{want}`, found `{got}`")));
        }
        Ok(())
    }

    pub(crate) fn next_values<T: std::str::FromStr>(&mut self) -> Result<Vec<T>> {
        let line = self.require_line()?;
        line.split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                tok.parse::<T>().map_err(|_| Error::Parse {
                    line: self.line_no,
                    column: i + 1,
                    reason: format!("cannot parse `{tok}`"),
                })
            })
            .collect()
    }
}

/// Uniform draw from `{0..vocab_size-1} \ {excluded}`.
pub fn sample_negative<R: Rng + ?Sized>(
    rng: &mut R,
    vocab_size: usize,
    excluded: usize,
) -> Result<usize> {
    if vocab_size < 2 {
        return Err(Error::DegenerateVocabulary(vocab_size));
    }
    if excluded >= vocab_size {
        return Ok(rng.random_range(0..vocab_size));
    }
    let draw = rng.random_range(0..vocab_size - 1);
    Ok(if draw >= excluded { draw + 1 } else { draw })
}
