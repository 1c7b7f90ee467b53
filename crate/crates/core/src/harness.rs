//! Proposal classification, score fusion, and embedding export.

use crate::config::{hex, Seeds, TrainConfig};
use crate::dataset::split_by_kind;
use crate::encoder::{ClassEmbedding, FrozenTextEncoder};
use crate::error::{Error, Result};
use crate::geometry::{partition, ClassId, ProposalRecord, Split};
use crate::losses::{self, ScoreVector, Temperature};
use crate::prompt::{ClassTable, ClassTokenTable};
use crate::scalar::{dot, Scalar};
use crate::trainer::{class_embeddings, Params};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Header of exported class-embedding files.
pub const EMBEDDING_HEADER: &str = "D_e";

/// The `k` classes most similar to `f`, best first.
///
/// Equal cosines are ordered by ascending class id.
pub fn classify_topk<T: Scalar>(f: &[T], embeddings: &[ClassEmbedding<T>], k: usize) -> Result<Vec<ClassId>> {
    if k > embeddings.len() {
        return Err(Error::config(format!(
            "top-{k} requested from {} classes",
            embeddings.len()
        )));
    }
    let f = losses::unit(f)?;
    let mut scored: Vec<(T, &ClassId)> = embeddings.iter().map(|e| (dot(&f, &e.vector), &e.id)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.clone()).collect())
}

/// Elementwise geometric mean of two score vectors, renormalized.
pub fn fuse_scores<T: Scalar>(p_text: &ScoreVector<T>, p_image: &ScoreVector<T>) -> Result<ScoreVector<T>> {
    if p_text.len() != p_image.len() {
        return Err(Error::Dimension {
            what: "fused score vector",
            expected: p_text.len(),
            found: p_image.len(),
        });
    }
    let raw: Vec<T> = p_text.0.iter().zip(&p_image.0).map(|(&a, &b)| (a * b).sqrt()).collect();
    let total: T = raw.iter().copied().sum();
    if !(total > T::zero() && total.is_finite()) {
        return Err(Error::NonFinite {
            term: "fused score total".into(),
        });
    }
    Ok(ScoreVector(raw.into_iter().map(|x| x / total).collect()))
}

/// Hits and totals of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassCount {
    pub top1: usize,
    pub top5: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAccuracy {
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub base: SplitAccuracy,
    pub novel: SplitAccuracy,
    pub per_class: BTreeMap<ClassId, ClassCount>,
    /// Mean over negatives of the largest base-class probability.
    pub neg_max_prob: f64,
    /// Mean over negatives of the entropy of the base-class probabilities.
    pub neg_entropy: f64,
    pub neg_count: usize,
    pub config_hash: String,
    pub seeds: Seeds,
}

impl EvalReport {
    pub fn split(&self, s: Split) -> &SplitAccuracy {
        match s {
            Split::Base => &self.base,
            Split::Novel => &self.novel,
        }
    }

    /// One `metric<TAB>split<TAB>value` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, a) in [("base", &self.base), ("novel", &self.novel)] {
            let _ = writeln!(s, "top1\t{name}\t{}", a.top1);
            let _ = writeln!(s, "top5\t{name}\t{}", a.top5);
            let _ = writeln!(s, "count\t{name}\t{}", a.count);
        }
        for (id, c) in &self.per_class {
            let acc = if c.total == 0 { 0.0 } else { c.top1 as f64 / c.total as f64 };
            let _ = writeln!(s, "class_top1:{id}\tclass\t{acc}");
        }
        let _ = writeln!(s, "neg_max_prob\tnegative\t{}", self.neg_max_prob);
        let _ = writeln!(s, "neg_entropy\tnegative\t{}", self.neg_entropy);
        let _ = writeln!(s, "count\tnegative\t{}", self.neg_count);
        let _ = writeln!(s, "config_hash\tall\t{}", self.config_hash);
        let _ = writeln!(s, "seed_init\tall\t{}", self.seeds.init);
        let _ = writeln!(s, "seed_data\tall\t{}", self.seeds.data);
        let _ = writeln!(s, "seed_encoder\tall\t{}", self.seeds.encoder);
        s
    }
}

/// Scores every positive of `records` against `embeddings` (all classes)
/// and collects diagnostics on the negatives against the base classes.
///
/// Positives and negatives come from partitioning `records` at
/// `config.iou_threshold`.
pub fn evaluate<T: Scalar>(
    records: &[ProposalRecord<T>],
    embeddings: &[ClassEmbedding<T>],
    tokens: &ClassTokenTable<T>,
    config: &TrainConfig,
    config_hash: &[u8; 32],
) -> Result<EvalReport> {
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| r.embedding.is_none())
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!("records without embeddings: {}", missing.join(", "))));
    }
    let (gts, props) = split_by_kind(records.to_vec());
    let part = partition(&props, &gts, T::lit(config.iou_threshold))?;
    let tau = Temperature::new(T::lit(config.temperature))?;
    let k5 = embeddings.len().min(5);

    let mut per_class: BTreeMap<ClassId, ClassCount> =
        embeddings.iter().map(|e| (e.id.clone(), ClassCount::default())).collect();
    let mut hits = [[0usize; 2]; 2];
    let mut counts = [0usize; 2];
    for p in &part.positives {
        let label = p.label.as_ref().expect("positives are labelled");
        let split = tokens
            .get(label)
            .ok_or_else(|| Error::data(format!("record {} has unknown class {label}", p.id)))?
            .split;
        let ranked = classify_topk(p.embedding.as_deref().unwrap_or(&[]), embeddings, k5)?;
        let s = usize::from(split == Split::Novel);
        let c = per_class.entry(label.clone()).or_default();
        c.total += 1;
        counts[s] += 1;
        if ranked.first() == Some(label) {
            c.top1 += 1;
            hits[s][0] += 1;
        }
        if ranked.contains(label) {
            c.top5 += 1;
            hits[s][1] += 1;
        }
    }
    let acc = |s: usize| SplitAccuracy {
        top1: ratio(hits[s][0], counts[s]),
        top5: ratio(hits[s][1], counts[s]),
        count: counts[s],
    };

    let base: Vec<&[T]> = embeddings
        .iter()
        .filter(|e| tokens.get(&e.id).is_some_and(|t| t.split == Split::Base))
        .map(|e| e.vector.as_slice())
        .collect();
    let (mut max_p, mut ent) = (0.0, 0.0);
    if !base.is_empty() {
        for n in &part.negatives {
            let p = losses::class_probs(n.embedding.as_deref().unwrap_or(&[]), &base, tau)?;
            max_p += p.max().to_f64_lossless();
            ent += p.entropy().to_f64_lossless();
        }
    }
    let nn = part.negatives.len();
    Ok(EvalReport {
        base: acc(0),
        novel: acc(1),
        per_class,
        neg_max_prob: ratio_f(max_p, nn),
        neg_entropy: ratio_f(ent, nn),
        neg_count: nn,
        config_hash: hex(config_hash),
        seeds: config.seeds,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn ratio_f(a: f64, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a / b as f64
    }
}

/// Encodes every class with the trained groups and evaluates.
pub fn evaluate_params<T: Scalar>(
    records: &[ProposalRecord<T>],
    groups: &[Params<T>],
    encoder: &FrozenTextEncoder<T>,
    tokens: &ClassTokenTable<T>,
    config: &TrainConfig,
    config_hash: &[u8; 32],
) -> Result<EvalReport> {
    let embs = class_embeddings(
        groups,
        config.ensemble_level,
        config.token_position,
        encoder,
        tokens,
        &tokens.all_ids(),
    )?;
    evaluate(records, &embs, tokens, config, config_hash)
}

/// Writes class embeddings in the class-table text format with a `D_e`
/// header.
pub fn export_embeddings<T: Scalar>(
    embeddings: &[ClassEmbedding<T>],
    tokens: &ClassTokenTable<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    let mut table = ClassTable::new(dim);
    for e in embeddings {
        let split = tokens
            .get(&e.id)
            .ok_or_else(|| Error::data(format!("class {} is not in the token table", e.id)))?
            .split;
        table.insert(e.id.clone(), split, e.vector.clone())?;
    }
    table.write_text(path, EMBEDDING_HEADER)
}

/// Reads a file written by [`export_embeddings`].
pub fn import_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<ClassEmbedding<T>>> {
    let table = ClassTable::<T>::read_text(path, &[EMBEDDING_HEADER])?;
    Ok(table
        .entries()
        .iter()
        .map(|e| ClassEmbedding {
            id: e.id.clone(),
            vector: e.vector.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, v: &[f64]) -> ClassEmbedding<f64> {
        ClassEmbedding {
            id: id.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn self_match_and_tie_break() {
        let e = vec![emb("b", &[1.0, 0.0]), emb("a", &[1.0, 0.0]), emb("c", &[0.0, 1.0])];
        let r = classify_topk(&[2.0, 0.0], &e, 3).unwrap();
        assert_eq!(r, vec![ClassId::from("a"), "b".into(), "c".into()]);
        assert_eq!(classify_topk(&[0.0, 3.0], &e, 1).unwrap(), vec![ClassId::from("c")]);
        assert!(classify_topk(&[0.0, 0.0], &e, 1).is_err());
        assert!(classify_topk(&[1.0, 0.0], &e, 4).unwrap_err().is_config());
    }

    #[test]
    fn fusion_examples() {
        let p = ScoreVector(vec![0.7f64, 0.2, 0.1]);
        let f = fuse_scores(&p, &p).unwrap();
        for (a, b) in f.0.iter().zip(&p.0) {
            assert!((a - b).abs() < 1e-15);
        }
        let raw = fuse_scores(&ScoreVector(vec![0.9, 0.1]), &ScoreVector(vec![0.4, 0.6])).unwrap();
        let expect = 0.6 / (0.6 + (0.06f64).sqrt());
        assert!((raw.0[0] - expect).abs() < 1e-12);
        assert!(fuse_scores(&p, &ScoreVector(vec![0.5, 0.5])).is_err());
    }
}
