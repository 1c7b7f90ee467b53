//! Gradient engine and training loop for prompt contexts.
//!
//! The compute graph is fixed: context rows and a class token form a prompt,
//! the frozen encoder turns it into a class embedding, and the region
//! embeddings of a batch are scored against all base-class embeddings. The
//! gradient flows back through the encoder into the context rows only.

use crate::config::{EnsembleLevel, TrainConfig};
use crate::encoder::{ensemble_embeddings, ClassEmbedding, FrozenTextEncoder, Trace, MAX_PROMPT_LEN};
use crate::error::{Error, Result};
use crate::geometry::{self, ClassId, ContextGroup, ProposalPartition, ProposalRecord, Split};
use crate::losses::{self, terms, BgMode};
use crate::prompt::{self, assemble, assemble_bg, BackgroundContext, ClassTokenTable, PromptContext, TokenPosition};
use crate::rng;
use crate::scalar::{dot, Scalar};
use rand::seq::SliceRandom;
use rand::RngCore;

/// Learning rate after `step` of `total` steps under cosine annealing.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("cosine schedule needs at least one step"));
    }
    if step > total {
        return Err(Error::config(format!("step {step} is past the schedule end {total}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + phase.cos()))
}

/// A training region: unit embedding plus base-class index for positives.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub feature: Vec<T>,
    pub label: Option<usize>,
}

/// Trainable parameters of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub context: PromptContext<T>,
    pub background: Option<BackgroundContext<T>>,
}

/// Gradient with the same layout as [`Params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<T> {
    pub context: Vec<T>,
    pub background: Option<Vec<T>>,
}

impl<T: Scalar> Gradient<T> {
    pub fn norm(&self) -> T {
        let s: T = self
            .context
            .iter()
            .chain(self.background.iter().flatten())
            .map(|&g| g * g)
            .sum();
        s.sqrt()
    }
}

/// The batch objective for one group: mean positive term plus mean
/// negative term, with the negative term chosen by `mode`.
pub struct Objective<'a, T> {
    encoder: &'a FrozenTextEncoder<T>,
    tokens: Vec<Vec<T>>,
    class_ids: Vec<ClassId>,
    position: TokenPosition,
    tau: T,
    mode: BgMode,
}

impl<'a, T: Scalar> Objective<'a, T> {
    /// Scores against the base classes of `table`, in table order.
    pub fn new(
        encoder: &'a FrozenTextEncoder<T>,
        table: &ClassTokenTable<T>,
        position: TokenPosition,
        tau: f64,
        mode: BgMode,
    ) -> Result<Self> {
        let class_ids = table.ids(Split::Base);
        if class_ids.is_empty() {
            return Err(Error::data("token table has no base classes"));
        }
        let tokens = class_ids
            .iter()
            .map(|id| table.vector(id).map(<[T]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        losses::Temperature::new(T::lit(tau))?;
        Ok(Objective {
            encoder,
            tokens,
            class_ids,
            position,
            tau: T::lit(tau),
            mode,
        })
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn mode(&self) -> BgMode {
        self.mode
    }

    /// Position of `id` among the base classes.
    pub fn label_index(&self, id: &ClassId) -> Option<usize> {
        self.class_ids.iter().position(|c| c == id)
    }

    /// Converts labelled records into samples.
    ///
    /// Records without an embedding are reported together in one error.
    pub fn samples(&self, records: &[&ProposalRecord<T>]) -> Result<Vec<Sample<T>>> {
        let missing: Vec<&str> = records
            .iter()
            .filter(|r| r.embedding.is_none())
            .map(|r| r.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::data(format!("records without embeddings: {}", missing.join(", "))));
        }
        records
            .iter()
            .map(|r| {
                let label = match &r.label {
                    None => None,
                    Some(c) => Some(self.label_index(c).ok_or_else(|| {
                        Error::data(format!("record {} has label {c}, which is not a base class", r.id))
                    })?),
                };
                let feature = losses::unit(r.embedding.as_deref().unwrap_or(&[])).map_err(|_| {
                    Error::data(format!("record {} has a zero or non-finite embedding", r.id))
                })?;
                Ok(Sample {
                    id: r.id.clone(),
                    feature,
                    label,
                })
            })
            .collect()
    }

    fn check(&self, params: &Params<T>) -> Result<()> {
        if self.mode == BgMode::LearnableBg && params.background.is_none() {
            return Err(Error::config("learnable_bg mode needs a background context"));
        }
        if params.context.dim() != self.encoder.token_dim() {
            return Err(Error::Dimension {
                what: "context width",
                expected: self.encoder.token_dim(),
                found: params.context.dim(),
            });
        }
        Ok(())
    }

    /// Batch loss, or `None` when the batch contributes no term (only
    /// negatives in `no_bg` mode).
    pub fn loss(&self, params: &Params<T>, batch: &[&Sample<T>]) -> Result<Option<T>> {
        Ok(self.run(params, batch, false)?.map(|(l, _)| l))
    }

    /// Batch loss and its gradient with respect to the context rows (and
    /// background rows in `learnable_bg` mode).
    pub fn loss_and_grad(&self, params: &Params<T>, batch: &[&Sample<T>]) -> Result<Option<(T, Gradient<T>)>> {
        Ok(self.run(params, batch, true)?.map(|(l, g)| (l, g.expect("gradient requested"))))
    }

    fn run(&self, params: &Params<T>, batch: &[&Sample<T>], want_grad: bool) -> Result<Option<(T, Option<Gradient<T>>)>> {
        self.check(params)?;
        let positives: Vec<&Sample<T>> = batch.iter().copied().filter(|s| s.label.is_some()).collect();
        let negatives: Vec<&Sample<T>> = if self.mode == BgMode::NoBg {
            Vec::new()
        } else {
            batch.iter().copied().filter(|s| s.label.is_none()).collect()
        };
        if positives.is_empty() && negatives.is_empty() {
            return Ok(None);
        }

        let traces: Vec<Trace<T>> = self
            .tokens
            .iter()
            .map(|w| self.encoder.forward(&assemble(&params.context, w, self.position)?))
            .collect::<Result<_>>()?;
        let bg_trace = match (self.mode, &params.background) {
            (BgMode::LearnableBg, Some(bg)) if !negatives.is_empty() => Some(self.encoder.forward(&assemble_bg(bg))?),
            _ => None,
        };
        let mut embs: Vec<&[T]> = traces.iter().map(|t| t.output()).collect();
        if let Some(t) = &bg_trace {
            embs.push(t.output());
        }
        let n_class = self.tokens.len();
        let d_e = self.encoder.embed_dim();
        let mut g_emb = vec![vec![T::zero(); d_e]; embs.len()];
        let inv_tau = T::one() / self.tau;

        let accumulate = |f: &[T], dl: &[T], weight: T, g_emb: &mut Vec<Vec<T>>| {
            for (g, &d) in g_emb.iter_mut().zip(dl) {
                let s = d * weight * inv_tau;
                if s != T::zero() {
                    for (gi, &fi) in g.iter_mut().zip(f) {
                        *gi += s * fi;
                    }
                }
            }
        };

        let mut loss_p = T::zero();
        if !positives.is_empty() {
            let w = T::one() / T::lit(positives.len() as f64);
            for s in &positives {
                let logits: Vec<T> = embs[..n_class].iter().map(|t| dot(&s.feature, t) * inv_tau).collect();
                let (l, dl) = terms::positive(&logits, s.label.unwrap_or(0));
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        term: format!("positive term of region {}", s.id),
                    });
                }
                loss_p += l;
                if want_grad {
                    accumulate(&s.feature, &dl, w, &mut g_emb);
                }
            }
            loss_p *= w;
        }

        let mut loss_n = T::zero();
        if !negatives.is_empty() {
            let w = T::one() / T::lit(negatives.len() as f64);
            for s in &negatives {
                let (l, dl) = match self.mode {
                    BgMode::SoftBg => {
                        let logits: Vec<T> = embs[..n_class].iter().map(|t| dot(&s.feature, t) * inv_tau).collect();
                        terms::soft_bg(&logits)
                    }
                    _ => {
                        let logits: Vec<T> = embs.iter().map(|t| dot(&s.feature, t) * inv_tau).collect();
                        terms::learnable_bg(&logits)
                    }
                };
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        term: format!("{} term of region {}", self.mode, s.id),
                    });
                }
                loss_n += l;
                if want_grad {
                    accumulate(&s.feature, &dl, w, &mut g_emb);
                }
            }
            loss_n *= w;
        }
        let loss = loss_p + loss_n;
        if !want_grad {
            return Ok(Some((loss, None)));
        }

        let l = params.context.len();
        let d_w = params.context.dim();
        let at = self.position.class_index(l);
        let mut g_ctx = vec![T::zero(); l * d_w];
        for (trace, g) in traces.iter().zip(&g_emb) {
            if g.iter().all(|&x| x == T::zero()) {
                continue;
            }
            let dx = self.encoder.backward(trace, g);
            for r in 0..=l {
                if r == at {
                    continue;
                }
                let i = if r < at { r } else { r - 1 };
                for (o, &v) in g_ctx[i * d_w..(i + 1) * d_w].iter_mut().zip(dx.row(r)) {
                    *o += v;
                }
            }
        }
        let g_bg = match (&bg_trace, &params.background) {
            (Some(trace), _) => Some(self.encoder.backward(trace, &g_emb[n_class]).into_vec()),
            (None, Some(bg)) if self.mode == BgMode::LearnableBg => Some(vec![T::zero(); bg.0.as_flat().len()]),
            _ => None,
        };
        if let Some(i) = g_ctx.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("context gradient, row {} column {}", i / d_w, i % d_w),
            });
        }
        if g_bg.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "background context gradient".into(),
            });
        }
        Ok(Some((
            loss,
            Some(Gradient {
                context: g_ctx,
                background: g_bg,
            }),
        )))
    }
}

/// Seed for the background context of a run, derived from the init seed.
pub fn background_seed(init_seed: u64) -> u64 {
    rng::stream(init_seed, "background", 0).next_u64()
}

/// Fresh parameters for one group. Every group starts from the same draw.
pub fn init_params<T: Scalar>(config: &TrainConfig) -> Result<Params<T>> {
    let context = prompt::init_context(config.context_len, config.token_dim, config.init_std, config.seeds.init)?;
    let background = match config.bg_mode {
        BgMode::LearnableBg => Some(BackgroundContext(prompt::init_context(
            config.context_len,
            config.token_dim,
            config.init_std,
            background_seed(config.seeds.init),
        )?)),
        _ => None,
    };
    Ok(Params { context, background })
}

/// Outcome of training one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRun<T> {
    pub lo: f64,
    pub hi: f64,
    pub positives: usize,
    pub params: Params<T>,
    /// Loss over the whole group before the first step.
    pub initial_loss: T,
    /// Loss over the whole group after the last step.
    pub final_loss: T,
    pub steps: usize,
}

/// Trains one group's context with SGD and cosine annealing.
///
/// Each epoch shuffles the group's positives together with the shared
/// negatives and walks them in batches of `batch_size`. A batch without any
/// loss term leaves the parameters unchanged but still counts as a step.
pub fn train_group<T: Scalar>(
    group: &ContextGroup<T>,
    group_index: usize,
    negatives: &[ProposalRecord<T>],
    config: &TrainConfig,
    encoder: &FrozenTextEncoder<T>,
    tokens: &ClassTokenTable<T>,
) -> Result<GroupRun<T>> {
    if group.members.is_empty() {
        return Err(Error::data(format!("group [{}, {}) has no positives", group.lo, group.hi)));
    }
    let objective = Objective::new(encoder, tokens, config.token_position, config.temperature, config.bg_mode)?;
    let records: Vec<&ProposalRecord<T>> = group.members.iter().chain(negatives).collect();
    let samples = objective.samples(&records)?;
    let all: Vec<&Sample<T>> = samples.iter().collect();

    let mut params = init_params::<T>(config)?;
    let initial_loss = objective.loss(&params, &all)?.unwrap_or_else(T::zero);

    let per_epoch = samples.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = rng::stream(config.seeds.data, "batches", group_index as u64);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let lr = T::lit(cosine_lr(step, total, config.lr)?);
            if let Some((_, g)) = objective.loss_and_grad(&params, &batch)? {
                for (v, d) in params.context.as_flat_mut().iter_mut().zip(&g.context) {
                    *v -= lr * *d;
                }
                if let (Some(bg), Some(gb)) = (params.background.as_mut(), g.background.as_ref()) {
                    for (v, d) in bg.0.as_flat_mut().iter_mut().zip(gb) {
                        *v -= lr * *d;
                    }
                }
            }
            step += 1;
        }
    }
    let final_loss = objective.loss(&params, &all)?.unwrap_or_else(T::zero);
    Ok(GroupRun {
        lo: group.lo,
        hi: group.hi,
        positives: group.members.len(),
        params,
        initial_loss,
        final_loss,
        steps: step,
    })
}

/// Removes the record kinds switched off by the data-source flags.
pub fn apply_sources<T: Scalar>(partition: &ProposalPartition<T>, config: &TrainConfig) -> ProposalPartition<T> {
    let s = config.sources;
    ProposalPartition {
        positives: partition
            .positives
            .iter()
            .filter(|p| if p.is_ground_truth() { s.gt } else { s.fg })
            .cloned()
            .collect(),
        negatives: if s.bg { partition.negatives.clone() } else { Vec::new() },
        threshold: partition.threshold,
    }
}

/// All trained groups plus what is needed to use them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun<T> {
    pub config: TrainConfig,
    pub groups: Vec<GroupRun<T>>,
    /// Indices of grading intervals that had no positives and were skipped.
    pub skipped: Vec<usize>,
}

impl<T: Scalar> TrainRun<T> {
    /// Mean of the per-group contexts.
    pub fn context(&self) -> Result<PromptContext<T>> {
        let ctxs: Vec<PromptContext<T>> = self.groups.iter().map(|g| g.params.context.clone()).collect();
        prompt::ensemble(&ctxs)
    }

    /// Mean of the per-group background contexts, if trained.
    pub fn background(&self) -> Result<Option<BackgroundContext<T>>> {
        let bgs: Vec<PromptContext<T>> = self
            .groups
            .iter()
            .filter_map(|g| g.params.background.as_ref().map(|b| b.0.clone()))
            .collect();
        if bgs.is_empty() {
            return Ok(None);
        }
        Ok(Some(BackgroundContext(prompt::ensemble(&bgs)?)))
    }

    /// Class embeddings for `ids`, ensembled at the configured level.
    pub fn class_embeddings(
        &self,
        encoder: &FrozenTextEncoder<T>,
        tokens: &ClassTokenTable<T>,
        ids: &[ClassId],
    ) -> Result<Vec<ClassEmbedding<T>>> {
        class_embeddings(&self.groups_params(), self.config.ensemble_level, self.config.token_position, encoder, tokens, ids)
    }

    fn groups_params(&self) -> Vec<Params<T>> {
        self.groups.iter().map(|g| g.params.clone()).collect()
    }
}

/// Class embeddings from per-group parameters.
///
/// At context level the contexts are averaged and encoded once; at
/// embedding level each group's embeddings are averaged and renormalized.
pub fn class_embeddings<T: Scalar>(
    groups: &[Params<T>],
    level: EnsembleLevel,
    position: TokenPosition,
    encoder: &FrozenTextEncoder<T>,
    tokens: &ClassTokenTable<T>,
    ids: &[ClassId],
) -> Result<Vec<ClassEmbedding<T>>> {
    let ctxs: Vec<PromptContext<T>> = groups.iter().map(|g| g.context.clone()).collect();
    match level {
        EnsembleLevel::Context => encoder.encode_class_set(&prompt::ensemble(&ctxs)?, tokens, position, ids),
        EnsembleLevel::Embedding => {
            let sets = ctxs
                .iter()
                .map(|c| encoder.encode_class_set(c, tokens, position, ids))
                .collect::<Result<Vec<_>>>()?;
            ensemble_embeddings(&sets)
        }
    }
}

/// Partition, grade, subsample negatives, then train every nonempty group.
pub fn train_all<T: Scalar>(
    partition: &ProposalPartition<T>,
    config: &TrainConfig,
    encoder: &FrozenTextEncoder<T>,
    tokens: &ClassTokenTable<T>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    if encoder.token_dim() != config.token_dim || encoder.embed_dim() != config.embed_dim {
        return Err(Error::config(format!(
            "encoder dims ({}, {}) differ from config dims ({}, {})",
            encoder.token_dim(),
            encoder.embed_dim(),
            config.token_dim,
            config.embed_dim
        )));
    }
    let used = apply_sources(partition, config);
    let groups = geometry::grade(&used, &config.grading, config.gt_in_all_groups)?;
    let negatives = if used.negatives.is_empty() {
        Vec::new()
    } else {
        geometry::subsample_negatives(&used.negatives, config.neg_fraction, config.seeds.data)?
    };
    if config.bg_mode != BgMode::NoBg && negatives.is_empty() {
        return Err(Error::data(format!(
            "bg_mode {} needs negative proposals, but none are available",
            config.bg_mode
        )));
    }
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        if g.members.is_empty() {
            skipped.push(k);
            continue;
        }
        runs.push(train_group(g, k, &negatives, config, encoder, tokens)?);
    }
    if runs.is_empty() {
        return Err(Error::data("no grading interval contains a positive proposal"));
    }
    Ok(TrainRun {
        config: config.clone(),
        groups: runs,
        skipped,
    })
}

/// Builds the frozen encoder a configuration refers to.
pub fn build_encoder<T: Scalar>(config: &TrainConfig) -> FrozenTextEncoder<T> {
    FrozenTextEncoder::build(config.seeds.encoder, config.token_dim, config.embed_dim, MAX_PROMPT_LEN)
}

/// Finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Components smaller than this fraction of the largest numeric component
/// are compared against that fraction instead of their own magnitude.
pub const FD_RELATIVE_FLOOR: f64 = 1e-3;
/// Base classes in a gradient-check instance.
pub const GRADCHECK_CLASSES: usize = 5;
/// Regions of each kind in a gradient-check batch.
pub const GRADCHECK_REGIONS: usize = 6;
/// Scale of the random contexts in a gradient-check instance.
pub const GRADCHECK_CONTEXT_STD: f64 = 0.1;

/// Analytic and finite-difference gradients of one random instance.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub mode: BgMode,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Background rows; `None` unless the mode trains them.
    pub analytic_bg: Option<Vec<f64>>,
    pub numeric_bg: Option<Vec<f64>>,
    pub max_rel_error: f64,
}

/// Largest component-wise relative error between two gradients.
///
/// Each difference is divided by `max(|a|, |n|, floor)` where `floor` is
/// [`FD_RELATIVE_FLOOR`] times the largest numeric magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (FD_RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn flat_mut(p: &mut Params<f64>, background: bool) -> &mut [f64] {
    match (background, p.background.as_mut()) {
        (true, Some(bg)) => bg.0.as_flat_mut(),
        _ => p.context.as_flat_mut(),
    }
}

fn central_difference(
    objective: &Objective<'_, f64>,
    params: &Params<f64>,
    batch: &[&Sample<f64>],
    background: bool,
) -> Result<Vec<f64>> {
    let n = if background {
        params.background.as_ref().map_or(0, |b| b.0.as_flat().len())
    } else {
        params.context.as_flat().len()
    };
    let mut out = Vec::with_capacity(n);
    let mut p = params.clone();
    for i in 0..n {
        let orig = flat_mut(&mut p, background)[i];
        flat_mut(&mut p, background)[i] = orig + FD_STEP;
        let up = objective.loss(&p, batch)?.unwrap_or(0.0);
        flat_mut(&mut p, background)[i] = orig - FD_STEP;
        let down = objective.loss(&p, batch)?.unwrap_or(0.0);
        flat_mut(&mut p, background)[i] = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// One random instance: encoder, classes, contexts and a mixed batch.
fn gradcheck_instance(
    config: &TrainConfig,
    mode: BgMode,
    seed: u64,
    index: u64,
) -> Result<GradientReport> {
    let mut r = rng::stream(seed, "gradcheck", index);
    let d_w = config.token_dim;
    let d_e = config.embed_dim;
    let encoder = FrozenTextEncoder::<f64>::build(r.next_u64(), d_w, d_e, MAX_PROMPT_LEN);
    let mut table = ClassTokenTable::new(d_w);
    for c in 0..GRADCHECK_CLASSES {
        let w = rng::normal_vec::<f64>(&mut r, d_w, 1.0);
        let w = crate::scalar::normalized(&w).ok_or_else(|| Error::data("degenerate token"))?;
        table.insert(ClassId::new(format!("c{c}")), Split::Base, w)?;
    }
    let objective = Objective::new(&encoder, &table, config.token_position, config.temperature, mode)?;
    let context = PromptContext::from_flat(
        config.context_len,
        d_w,
        rng::normal_vec(&mut r, config.context_len * d_w, GRADCHECK_CONTEXT_STD),
    )?;
    let background = match mode {
        BgMode::LearnableBg => Some(BackgroundContext(PromptContext::from_flat(
            config.context_len,
            d_w,
            rng::normal_vec(&mut r, config.context_len * d_w, GRADCHECK_CONTEXT_STD),
        )?)),
        _ => None,
    };
    let params = Params { context, background };
    let mut samples = Vec::new();
    for i in 0..2 * GRADCHECK_REGIONS {
        let f = losses::unit(&rng::normal_vec::<f64>(&mut r, d_e, 1.0))?;
        let label = (i < GRADCHECK_REGIONS).then_some(i % GRADCHECK_CLASSES);
        samples.push(Sample {
            id: format!("r{i}"),
            feature: f,
            label,
        });
    }
    let batch: Vec<&Sample<f64>> = samples.iter().collect();
    let (_, g) = objective
        .loss_and_grad(&params, &batch)?
        .ok_or_else(|| Error::data("gradient check batch has no loss term"))?;
    let numeric = central_difference(&objective, &params, &batch, false)?;
    let numeric_bg = match mode {
        BgMode::LearnableBg => Some(central_difference(&objective, &params, &batch, true)?),
        _ => None,
    };
    let mut all_a = g.context.clone();
    let mut all_n = numeric.clone();
    if let (Some(a), Some(n)) = (&g.background, &numeric_bg) {
        all_a.extend_from_slice(a);
        all_n.extend_from_slice(n);
    }
    Ok(GradientReport {
        mode,
        max_rel_error: max_relative_error(&all_a, &all_n),
        analytic: g.context,
        numeric,
        analytic_bg: g.background,
        numeric_bg,
    })
}

/// Compares analytic and central-difference gradients on `instances`
/// random instances per loss mode, at the dimensions, context length, token
/// position and temperature of `config`.
pub fn gradcheck(config: &TrainConfig, seed: u64, instances: usize) -> Result<Vec<GradientReport>> {
    let mut out = Vec::new();
    for (m, mode) in BgMode::ALL.into_iter().enumerate() {
        for i in 0..instances {
            out.push(gradcheck_instance(config, mode, seed, (m * 1_000_000 + i) as u64)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.002).unwrap(), 0.002);
        assert!(cosine_lr(10, 10, 0.002).unwrap().abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.002).unwrap() - 0.001).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.002).unwrap_err().is_config());
        assert!(cosine_lr(11, 10, 0.002).is_err());
        let lrs: Vec<f64> = (0..=20).map(|s| cosine_lr(s, 20, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 1e-9]), 1e-6);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn small_gradcheck_passes() {
        let cfg = TrainConfig {
            context_len: 3,
            token_dim: 8,
            embed_dim: 8,
            temperature: 0.5,
            ..TrainConfig::default()
        };
        for r in gradcheck(&cfg, 7, 2).unwrap() {
            assert!(r.max_rel_error < 1e-5, "{} {}", r.mode, r.max_rel_error);
            assert_eq!(r.analytic_bg.is_some(), r.mode == BgMode::LearnableBg);
        }
    }
}
