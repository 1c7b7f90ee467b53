//! Learnable context vectors, class token tables and prompt assembly.

use crate::error::{Error, Result};
use crate::geometry::{ClassId, Split};
use crate::linalg::Matrix;
use crate::rng;
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

/// The shared context vectors `v_1 .. v_L`, each of dimension `D_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptContext<T> {
    vectors: Matrix<T>,
    pub trainable: bool,
}

impl<T: Scalar> PromptContext<T> {
    /// Builds a context from a row-major `len × dim` buffer.
    pub fn from_flat(len: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::config("context length and width must be at least 1"));
        }
        if data.len() != len * dim {
            return Err(Error::Dimension {
                what: "context buffer",
                expected: len * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                term: "context vector".into(),
            });
        }
        Ok(PromptContext {
            vectors: Matrix::from_vec(len, dim, data),
            trainable: true,
        })
    }

    pub fn from_vectors(vectors: &[Vec<T>]) -> Result<Self> {
        let len = vectors.len();
        let dim = vectors.first().map_or(0, Vec::len);
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::Dimension {
                what: "context vector",
                expected: dim,
                found: v.len(),
            });
        }
        Self::from_flat(len, dim, vectors.concat())
    }

    /// Context length `L`.
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width `D_w`.
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, i: usize) -> &[T] {
        self.vectors.row(i)
    }

    pub fn as_flat(&self) -> &[T] {
        self.vectors.as_slice()
    }

    pub fn as_flat_mut(&mut self) -> &mut [T] {
        self.vectors.as_mut_slice()
    }

    pub fn norm(&self) -> T {
        crate::scalar::norm(self.as_flat())
    }
}

/// Context vectors of the class-free background prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundContext<T>(pub PromptContext<T>);

/// Where the class token sits inside the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TokenPosition {
    Front,
    Middle,
    #[default]
    End,
}

impl TokenPosition {
    pub const ALL: [TokenPosition; 3] = [TokenPosition::Front, TokenPosition::Middle, TokenPosition::End];

    /// Row of the class token in a prompt with `len` context vectors.
    pub fn class_index(self, len: usize) -> usize {
        match self {
            TokenPosition::Front => 0,
            TokenPosition::Middle => len / 2,
            TokenPosition::End => len,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenPosition::Front => "front",
            TokenPosition::Middle => "middle",
            TokenPosition::End => "end",
        }
    }
}

impl fmt::Display for TokenPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenPosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(TokenPosition::Front),
            "middle" => Ok(TokenPosition::Middle),
            "end" => Ok(TokenPosition::End),
            other => Err(Error::config(format!(
                "token position must be front, middle or end, got {other:?}"
            ))),
        }
    }
}

/// Draws a fresh context with i.i.d. N(0, σ²) entries.
pub fn init_context<T: Scalar>(len: usize, dim: usize, sigma: f64, seed: u64) -> Result<PromptContext<T>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!(
            "context init scale must be positive, got {sigma}"
        )));
    }
    if len == 0 || dim == 0 {
        return Err(Error::config("context length and width must be at least 1"));
    }
    let mut rng = rng::from_seed(seed);
    PromptContext::from_flat(len, dim, rng::normal_vec(&mut rng, len * dim, sigma))
}

/// Inserts the class token into the context at `pos`, giving `L + 1` rows.
pub fn assemble<T: Scalar>(ctx: &PromptContext<T>, token: &[T], pos: TokenPosition) -> Result<Matrix<T>> {
    if token.len() != ctx.dim() {
        return Err(Error::Dimension {
            what: "class token",
            expected: ctx.dim(),
            found: token.len(),
        });
    }
    let l = ctx.len();
    let at = pos.class_index(l);
    let mut data = Vec::with_capacity((l + 1) * ctx.dim());
    data.extend_from_slice(&ctx.as_flat()[..at * ctx.dim()]);
    data.extend_from_slice(token);
    data.extend_from_slice(&ctx.as_flat()[at * ctx.dim()..]);
    Ok(Matrix::from_vec(l + 1, ctx.dim(), data))
}

/// The background prompt is its context vectors alone.
pub fn assemble_bg<T: Scalar>(bg: &BackgroundContext<T>) -> Matrix<T> {
    Matrix::from_vec(bg.0.len(), bg.0.dim(), bg.0.as_flat().to_vec())
}

/// Element-wise mean of several contexts.
///
/// Each coordinate's values are sorted before a running mean is taken, so
/// the result does not depend on input order and K identical inputs return
/// that input exactly.
pub fn ensemble<T: Scalar>(contexts: &[PromptContext<T>]) -> Result<PromptContext<T>> {
    let first = contexts
        .first()
        .ok_or_else(|| Error::config("cannot ensemble an empty list of contexts"))?;
    for c in contexts {
        if c.len() != first.len() || c.dim() != first.dim() {
            return Err(Error::Dimension {
                what: "ensembled context",
                expected: first.len() * first.dim(),
                found: c.len() * c.dim(),
            });
        }
    }
    let slices: Vec<&[T]> = contexts.iter().map(|c| c.as_flat()).collect();
    let out = sorted_mean(&slices);
    let mut ctx = PromptContext::from_flat(first.len(), first.dim(), out)?;
    ctx.trainable = first.trainable;
    Ok(ctx)
}

/// Order-independent coordinate-wise mean of equally long slices.
pub(crate) fn sorted_mean<T: Scalar>(slices: &[&[T]]) -> Vec<T> {
    let n = slices[0].len();
    let mut column = Vec::with_capacity(slices.len());
    (0..n)
        .map(|i| {
            column.clear();
            column.extend(slices.iter().map(|s| s[i]));
            column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let mut m = column[0];
            for (k, &x) in column.iter().enumerate().skip(1) {
                m += (x - m) / T::lit((k + 1) as f64);
            }
            m
        })
        .collect()
}

/// One row of a class table.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry<T> {
    pub id: ClassId,
    pub split: Split,
    pub vector: Vec<T>,
}

/// Fixed per-class vectors keyed by class id, in insertion order.
///
/// Used both for class tokens `w_c` (width `D_w`) and for exported class
/// embeddings `t_c` (width `D_e`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTable<T> {
    dim: usize,
    entries: Vec<ClassEntry<T>>,
    index: BTreeMap<ClassId, usize>,
}

/// Class tokens `w_c`.
pub type ClassTokenTable<T> = ClassTable<T>;

impl<T: Scalar> ClassTable<T> {
    pub fn new(dim: usize) -> Self {
        ClassTable {
            dim,
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: ClassId, split: Split, vector: Vec<T>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                what: "class vector",
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::data(format!("class {id} has a non-finite entry")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::data(format!("class {id} listed twice")));
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push(ClassEntry { id, split, vector });
        Ok(())
    }

    pub fn entries(&self) -> &[ClassEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: &ClassId) -> Option<&ClassEntry<T>> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    /// Vector for `id`, or a data error naming the unknown class.
    pub fn vector(&self, id: &ClassId) -> Result<&[T]> {
        self.get(id)
            .map(|e| e.vector.as_slice())
            .ok_or_else(|| Error::data(format!("unknown class id {id}")))
    }

    /// Ids of one split in table order.
    pub fn ids(&self, split: Split) -> Vec<ClassId> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn all_ids(&self) -> Vec<ClassId> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// Writes the header `<name> <dim>` then `<id> <split> <values...>` lines.
    pub fn write_text(&self, path: impl AsRef<Path>, header: &str) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(w, "{header} {}", self.dim).map_err(io)?;
        for e in &self.entries {
            write!(w, "{} {}", e.id, e.split).map_err(io)?;
            for v in &e.vector {
                write!(w, " {:?}", v.to_f64_lossless()).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a table written by [`ClassTable::write_text`]. The header
    /// keyword must be one of `accept`.
    pub fn read_text(path: impl AsRef<Path>, accept: &[&str]) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let bad = |n: usize, msg: String| Error::data(format!("{}:{}: {msg}", path.display(), n + 1));

        let (n0, header) = loop {
            match lines.next() {
                Some((n, l)) => {
                    let l = l.map_err(|e| Error::io(path, e))?;
                    if !l.trim().is_empty() {
                        break (n, l);
                    }
                }
                None => return Err(Error::data(format!("{}: empty file", path.display()))),
            }
        };
        let mut head = header.split_whitespace();
        let key = head.next().unwrap_or("");
        if !accept.contains(&key) {
            return Err(bad(n0, format!("expected header {accept:?}, found {key:?}")));
        }
        let dim: usize = head
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(n0, "header needs an integer width".into()))?;
        if head.next().is_some() || dim == 0 {
            return Err(bad(n0, "malformed header".into()));
        }

        let mut table = ClassTable::new(dim);
        for (n, l) in lines {
            let l = l.map_err(|e| Error::io(path, e))?;
            let mut it = l.split_whitespace();
            let Some(id) = it.next() else { continue };
            let split: Split = it
                .next()
                .ok_or_else(|| bad(n, "missing split".into()))?
                .parse()
                .map_err(|e: Error| bad(n, e.to_string()))?;
            let vector = it
                .map(|s| s.parse::<f64>().map(T::lit))
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|e| bad(n, e.to_string()))?;
            table
                .insert(ClassId::new(id), split, vector)
                .map_err(|e| bad(n, e.to_string()))?;
        }
        Ok(table)
    }
}

/// Header keyword of token table files.
pub const TOKEN_HEADER: &str = "D_w";
