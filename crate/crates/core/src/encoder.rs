//! Frozen reference text encoder.
//!
//! A prompt of `n` token vectors is encoded as follows:
//!
//! 1. Fixed positional encodings are added to every row.
//! 2. The last row issues one query per attention head. Keys are derived
//!    from the positional encodings alone, and the other rows supply the
//!    values. Because the last row does not attend to itself, a class token
//!    at the end of the prompt shapes the output only through the context
//!    rows it selects.
//! 3. The head outputs are projected back to `D_w` and passed through a
//!    residual feed-forward block with a `tanh` hidden layer.
//! 4. A linear map to `D_e` and L2 normalization give the class embedding.
//!
//! All weights are scaled Gaussians drawn from a seeded stream at build time
//! and never change afterwards. [`FrozenTextEncoder::backward`] returns the
//! exact gradient of a loss with respect to the input rows.

use crate::error::{Error, Result};
use crate::geometry::ClassId;
use crate::linalg::Matrix;
use crate::prompt::{assemble, ClassTokenTable, PromptContext, TokenPosition};
use crate::rng;
use crate::scalar::{dot, Scalar};

/// Number of attention heads.
pub const HEADS: usize = 4;
/// Gain on the query and key projections; sets attention sharpness.
pub const ATTENTION_GAIN: f64 = 63.0;
/// Scale of the positional encodings.
pub const POSITION_SCALE: f64 = 0.03;
/// Gain on the value projection.
pub const VALUE_GAIN: f64 = 4.0;
/// Hidden width of the feed-forward block relative to `D_w`.
pub const FFN_RATIO: usize = 2;
/// Number of positional encodings; the longest prompt the encoder accepts.
pub const MAX_PROMPT_LEN: usize = 77;

/// A unit-norm class embedding `t_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedding<T> {
    pub id: ClassId,
    pub vector: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct Head<T> {
    wq: Matrix<T>,
    /// Keys of every position, `max_len × head_dim`.
    keys: Matrix<T>,
    wv: Matrix<T>,
    wo: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTextEncoder<T> {
    seed: u64,
    d_w: usize,
    d_e: usize,
    max_len: usize,
    head_dim: usize,
    positions: Matrix<T>,
    heads: Vec<Head<T>>,
    w1: Matrix<T>,
    w2: Matrix<T>,
    wp: Matrix<T>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    rows: usize,
    /// Rows the readout attends to.
    sources: Vec<usize>,
    weights: Vec<Vec<T>>,
    /// Per head, the values of each source row.
    values: Vec<Vec<Vec<T>>>,
    hidden: Vec<T>,
    z_norm: T,
    output: Vec<T>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

impl<T: Scalar> FrozenTextEncoder<T> {
    /// Draws all weights from the stream for `seed`.
    ///
    /// Dimensions of zero are raised to one.
    pub fn build(seed: u64, d_w: usize, d_e: usize, max_len: usize) -> Self {
        let d_w = d_w.max(1);
        let d_e = d_e.max(1);
        let max_len = max_len.max(1);
        let head_dim = (d_w / HEADS).max(1);
        let hidden = FFN_RATIO * d_w;
        let inv = 1.0 / (d_w as f64).sqrt();
        let mut r = rng::stream(seed, "encoder", 0);

        let positions = Matrix::gaussian(&mut r, max_len, d_w, POSITION_SCALE * inv);
        let heads = (0..HEADS)
            .map(|_| {
                let wq = Matrix::gaussian(&mut r, d_w, head_dim, ATTENTION_GAIN * inv);
                let wk = Matrix::gaussian(&mut r, d_w, head_dim, ATTENTION_GAIN * inv);
                let wv = Matrix::gaussian(&mut r, d_w, head_dim, VALUE_GAIN * inv);
                let wo = Matrix::gaussian(&mut r, head_dim, d_w, inv);
                let mut keys = Matrix::zeros(max_len, head_dim);
                for p in 0..max_len {
                    let k = wk.left_mul(positions.row(p));
                    keys.row_mut(p).copy_from_slice(&k);
                }
                Head { wq, keys, wv, wo }
            })
            .collect();
        let w1 = Matrix::gaussian(&mut r, d_w, hidden, inv);
        let w2 = Matrix::gaussian(&mut r, hidden, d_w, 1.0 / (hidden as f64).sqrt());
        let wp = Matrix::gaussian(&mut r, d_w, d_e, inv);
        FrozenTextEncoder {
            seed,
            d_w,
            d_e,
            max_len,
            head_dim,
            positions,
            heads,
            w1,
            w2,
            wp,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_dim(&self) -> usize {
        self.d_w
    }

    pub fn embed_dim(&self) -> usize {
        self.d_e
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Encodes a prompt into a unit vector of length `D_e`.
    pub fn encode(&self, seq: &Matrix<T>) -> Result<Vec<T>> {
        Ok(self.forward(seq)?.output)
    }

    /// Encodes and keeps the intermediates needed by [`Self::backward`].
    pub fn forward(&self, seq: &Matrix<T>) -> Result<Trace<T>> {
        let n = seq.rows();
        if n == 0 {
            return Err(Error::data("cannot encode an empty prompt"));
        }
        if n > self.max_len {
            return Err(Error::config(format!(
                "prompt of {n} rows exceeds encoder capacity {}",
                self.max_len
            )));
        }
        if seq.cols() != self.d_w {
            return Err(Error::Dimension {
                what: "prompt row",
                expected: self.d_w,
                found: seq.cols(),
            });
        }

        let mut x = seq.clone();
        for i in 0..n {
            for (a, &p) in x.row_mut(i).iter_mut().zip(self.positions.row(i)) {
                *a += p;
            }
        }
        let r = n - 1;
        let sources: Vec<usize> = if n == 1 { vec![0] } else { (0..r).collect() };
        let scale = T::lit(1.0 / (self.head_dim as f64).sqrt());

        let mut h1 = vec![T::zero(); self.d_w];
        let mut weights = Vec::with_capacity(HEADS);
        let mut values = Vec::with_capacity(HEADS);
        for head in &self.heads {
            let q = head.wq.left_mul(x.row(r));
            let scores: Vec<T> = sources
                .iter()
                .map(|&j| dot(&q, head.keys.row(j)) * scale)
                .collect();
            let a = softmax(&scores);
            let vs: Vec<Vec<T>> = sources.iter().map(|&j| head.wv.left_mul(x.row(j))).collect();
            let mut o = vec![T::zero(); self.head_dim];
            for (aj, v) in a.iter().zip(&vs) {
                for (oi, &vi) in o.iter_mut().zip(v) {
                    *oi += *aj * vi;
                }
            }
            for (hi, oi) in h1.iter_mut().zip(head.wo.left_mul(&o)) {
                *hi += oi;
            }
            weights.push(a);
            values.push(vs);
        }

        let hidden: Vec<T> = self.w1.left_mul(&h1).into_iter().map(|v| v.tanh()).collect();
        let mut h2 = self.w2.left_mul(&hidden);
        for (a, &b) in h2.iter_mut().zip(&h1) {
            *a += b;
        }
        let z = self.wp.left_mul(&h2);
        let z_norm = dot(&z, &z).sqrt();
        if !(z_norm > T::zero() && z_norm.is_finite()) {
            return Err(Error::NonFinite {
                term: "encoder output norm".into(),
            });
        }
        let output = z.iter().map(|&v| v / z_norm).collect();
        Ok(Trace {
            rows: n,
            sources,
            weights,
            values,
            hidden,
            z_norm,
            output,
        })
    }

    /// Gradient of a loss with respect to the input rows, given the gradient
    /// `grad_out` with respect to the encoder output.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &[T]) -> Matrix<T> {
        let n = trace.rows;
        let r = n - 1;
        let t = &trace.output;
        let proj = dot(t, grad_out);
        let dz: Vec<T> = grad_out
            .iter()
            .zip(t)
            .map(|(&g, &ti)| (g - ti * proj) / trace.z_norm)
            .collect();
        let dh2 = self.wp.right_mul(&dz);
        let du = self.w2.right_mul(&dh2);
        let dpre: Vec<T> = du
            .iter()
            .zip(&trace.hidden)
            .map(|(&d, &u)| d * (T::one() - u * u))
            .collect();
        let mut dh1 = self.w1.right_mul(&dpre);
        for (a, &b) in dh1.iter_mut().zip(&dh2) {
            *a += b;
        }

        let scale = T::lit(1.0 / (self.head_dim as f64).sqrt());
        let mut dx = Matrix::zeros(n, self.d_w);
        for (hi, head) in self.heads.iter().enumerate() {
            let a = &trace.weights[hi];
            let vs = &trace.values[hi];
            let d_o = head.wo.right_mul(&dh1);
            let da: Vec<T> = vs.iter().map(|v| dot(&d_o, v)).collect();
            let mean: T = a.iter().zip(&da).map(|(&ai, &di)| ai * di).sum();
            let mut dq = vec![T::zero(); self.head_dim];
            for (k, &j) in trace.sources.iter().enumerate() {
                let dv: Vec<T> = d_o.iter().map(|&g| a[k] * g).collect();
                for (o, g) in dx.row_mut(j).iter_mut().zip(head.wv.right_mul(&dv)) {
                    *o += g;
                }
                let ds = a[k] * (da[k] - mean) * scale;
                for (q, &kv) in dq.iter_mut().zip(head.keys.row(j)) {
                    *q += ds * kv;
                }
            }
            for (o, g) in dx.row_mut(r).iter_mut().zip(head.wq.right_mul(&dq)) {
                *o += g;
            }
        }
        dx
    }

    /// Encodes every class in `subset`, in the order given.
    pub fn encode_class_set(
        &self,
        ctx: &PromptContext<T>,
        tokens: &ClassTokenTable<T>,
        pos: TokenPosition,
        subset: &[ClassId],
    ) -> Result<Vec<ClassEmbedding<T>>> {
        subset
            .iter()
            .map(|id| {
                let seq = assemble(ctx, tokens.vector(id)?, pos)?;
                Ok(ClassEmbedding {
                    id: id.clone(),
                    vector: self.encode(&seq)?,
                })
            })
            .collect()
    }
}

fn softmax<T: Scalar>(s: &[T]) -> Vec<T> {
    let m = s.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let e: Vec<T> = s.iter().map(|&x| (x - m).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Averages several embeddings of the same class set and renormalizes.
///
/// All lists must name the same classes in the same order.
pub fn ensemble_embeddings<T: Scalar>(sets: &[Vec<ClassEmbedding<T>>]) -> Result<Vec<ClassEmbedding<T>>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::config("cannot ensemble an empty list of embedding sets"))?;
    for s in sets {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.id != b.id) {
            return Err(Error::data("embedding sets name different classes"));
        }
    }
    first
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let cols: Vec<&[T]> = sets.iter().map(|s| s[i].vector.as_slice()).collect();
            let mean = crate::prompt::sorted_mean(&cols);
            let vector = crate::scalar::normalized(&mean).ok_or_else(|| Error::NonFinite {
                term: format!("ensembled embedding of {}", e.id),
            })?;
            Ok(ClassEmbedding {
                id: e.id.clone(),
                vector,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_seq(seed: u64, n: usize, d: usize) -> Matrix<f64> {
        let mut r = rng::from_seed(seed);
        Matrix::gaussian(&mut r, n, d, 0.3)
    }

    #[test]
    fn output_is_unit_and_deterministic() {
        let e = FrozenTextEncoder::<f64>::build(3, 16, 12, 10);
        let s = random_seq(1, 9, 16);
        let a = e.encode(&s).unwrap();
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-12);
        let b = FrozenTextEncoder::<f64>::build(3, 16, 12, 10).encode(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_and_width_checked() {
        let e = FrozenTextEncoder::<f64>::build(3, 16, 12, 4);
        assert!(e.encode(&random_seq(1, 5, 16)).is_err());
        assert!(e.encode(&random_seq(1, 3, 15)).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let e = FrozenTextEncoder::<f64>::build(11, 8, 6, 6);
        let s = random_seq(2, 5, 8);
        let g_out: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = |m: &Matrix<f64>| dot(&e.encode(m).unwrap(), &g_out);
        let tr = e.forward(&s).unwrap();
        let g = e.backward(&tr, &g_out);
        let h = 1e-6;
        for i in 0..s.as_slice().len() {
            let mut a = s.clone();
            let mut b = s.clone();
            a.as_mut_slice()[i] += h;
            b.as_mut_slice()[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let ana = g.as_slice()[i];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "{i}: {num} vs {ana}");
        }
    }
}
