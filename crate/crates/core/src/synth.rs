//! Seeded synthetic benchmark.
//!
//! A hidden "true" context `V*` is drawn once per world. Each class direction
//! is the frozen encoder's output for the prompt `[V*, w_c]`, so a context
//! learned on the base classes can recover `V*` and with it the directions
//! of the novel classes. Region embeddings of positives scatter around their
//! class direction with noise that grows as the box IoU drops; background
//! embeddings are drawn to be equally similar to every base class and
//! dissimilar to all classes.

use crate::config::SynthConfig;
use crate::encoder::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ClassId, ProposalKind, ProposalRecord, Split};
use crate::prompt::{self, assemble, ClassTokenTable, PromptContext, TokenPosition};
use crate::rng::{self, Rng};
use crate::scalar::{dot, normalized, Scalar};
use rand::Rng as _;

/// IoU levels of generated positives; 1.0 is the ground-truth box itself.
pub const IOU_LEVELS: [f64; 6] = [1.0, 0.5, 0.6, 0.7, 0.8, 0.9];
/// Rejection-sampling budget for one negative.
pub const MAX_ATTEMPTS: usize = 1_000_000;
/// Largest IoU a background box may have with its image's ground truth.
pub const NEGATIVE_MAX_IOU: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDirection<T> {
    pub id: ClassId,
    pub split: Split,
    pub direction: Vec<T>,
}

/// Hidden state of a synthetic world. Training code never sees it; it only
/// shapes the generated embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedWorld<T> {
    pub planted: PromptContext<T>,
    pub classes: Vec<ClassDirection<T>>,
    pub sigma0: f64,
    pub slope: f64,
    pub rho: f64,
    pub seed: u64,
}

impl<T: Scalar> PlantedWorld<T> {
    pub fn num_base(&self) -> usize {
        self.classes.iter().filter(|c| c.split == Split::Base).count()
    }

    pub fn direction(&self, id: &ClassId) -> Option<&[T]> {
        self.classes.iter().find(|c| &c.id == id).map(|c| c.direction.as_slice())
    }

    /// Noise scale of a positive with IoU `q`.
    pub fn noise(&self, q: f64) -> f64 {
        self.sigma0 * (1.0 + self.slope * (1.0 - q))
    }
}

fn class_name(i: usize, total: usize) -> ClassId {
    let width = total.saturating_sub(1).to_string().len().max(2);
    ClassId::new(format!("class{i:0width$}"))
}

/// Draws tokens, the planted context, and the class directions.
///
/// The first `base_classes` ids are base, the rest novel. The planted context
/// has `context_len` rows and always puts the class token last.
pub fn gen_world<T: Scalar>(
    cfg: &SynthConfig,
    encoder: &FrozenTextEncoder<T>,
    context_len: usize,
) -> Result<(PlantedWorld<T>, ClassTokenTable<T>)> {
    if cfg.base_classes < 2 {
        return Err(Error::config(format!("need at least 2 base classes, got {}", cfg.base_classes)));
    }
    if !(cfg.rho > 0.0 && cfg.rho < 1.0) {
        return Err(Error::config(format!("rho must lie in (0, 1), got {}", cfg.rho)));
    }
    if !(cfg.sigma0 >= 0.0 && cfg.slope >= 0.0) {
        return Err(Error::config("sigma0 and slope must be nonnegative"));
    }
    let d_w = encoder.token_dim();
    let total = cfg.base_classes + cfg.novel_classes;
    let mut r = rng::stream(cfg.seed, "tokens", 0);
    let mut table = ClassTokenTable::new(d_w);
    for i in 0..total {
        let w = loop {
            if let Some(w) = normalized(&rng::normal_vec::<T>(&mut r, d_w, 1.0)) {
                break w;
            }
        };
        let split = if i < cfg.base_classes { Split::Base } else { Split::Novel };
        table.insert(class_name(i, total), split, w)?;
    }
    let planted = prompt::init_context(
        context_len,
        d_w,
        cfg.planted_std,
        rng::stream(cfg.seed, "planted", 0).random(),
    )?;
    let classes = table
        .entries()
        .iter()
        .map(|e| {
            Ok(ClassDirection {
                id: e.id.clone(),
                split: e.split,
                direction: encoder.encode(&assemble(&planted, &e.vector, TokenPosition::End)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        PlantedWorld {
            planted,
            classes,
            sigma0: cfg.sigma0,
            slope: cfg.slope,
            rho: cfg.rho,
            seed: cfg.seed,
        },
        table,
    ))
}

/// A box of the same size as `gt`, slid right so that its IoU with `gt` is
/// `q`, rounded so the computed IoU is not below `q`.
pub fn slide_box<T: Scalar>(gt: &BBox<T>, q: f64) -> Result<BBox<T>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("target IoU must lie in [0, 1], got {q}")));
    }
    // Equal boxes offset by d along x: IoU = (w - d) / (w + d).
    let w = gt.width();
    let mut d = w * T::lit((1.0 - q) / (1.0 + q));
    let place = |d: T| BBox::new(gt.x1 + d, gt.y1, gt.x2 + d, gt.y2);
    let mut b = place(d)?;
    for _ in 0..64 {
        if iou(&b, gt).to_f64_lossless() >= q || d <= T::zero() {
            break;
        }
        d = d - (d * T::epsilon()).max(T::min_positive_value());
        b = place(d)?;
    }
    Ok(b)
}

fn embed<T: Scalar>(rng: &mut Rng, u: &[T], sigma: f64) -> Result<Vec<T>> {
    let noise = rng::normal_vec::<T>(rng, u.len(), sigma);
    if sigma == 0.0 {
        return Ok(u.to_vec());
    }
    let f: Vec<T> = u
        .iter()
        .zip(noise)
        .map(|(&a, e)| a + e)
        .collect();
    normalized(&f).ok_or_else(|| Error::NonFinite {
        term: "synthetic region embedding".into(),
    })
}

/// `n` positives of one class, cycling through `levels`.
///
/// Every cycle is one image: a ground-truth box (which stands for level
/// 1.0) followed by one proposal per other level. If `levels` lacks 1.0 the
/// ground truth is still emitted and counts towards `n`.
pub fn gen_positives<T: Scalar>(
    world: &PlantedWorld<T>,
    class: &ClassId,
    n: usize,
    levels: &[f64],
    tag: &str,
    rng: &mut Rng,
) -> Result<Vec<ProposalRecord<T>>> {
    if levels.is_empty() || levels.iter().any(|&q| !(0.5..=1.0).contains(&q)) {
        return Err(Error::config("IoU levels must be nonempty and lie in [0.5, 1]"));
    }
    let c = world
        .classes
        .iter()
        .find(|c| &c.id == class)
        .ok_or_else(|| Error::data(format!("class {class} is not in the world")))?;
    let proposal_levels: Vec<f64> = levels.iter().copied().filter(|&q| q < 1.0).collect();
    let per_image = proposal_levels.len() + 1;
    let mut out = Vec::with_capacity(n);
    let mut gt_box = None;
    for i in 0..n {
        let slot = i % per_image;
        let image_id = format!("{tag}-{class}-img{:03}", i / per_image);
        if slot == 0 {
            let x = rng.random_range(0.0..400.0);
            let y = rng.random_range(0.0..400.0);
            let w = rng.random_range(50.0..150.0);
            let h = rng.random_range(50.0..150.0);
            let b = BBox::new(T::lit(x), T::lit(y), T::lit(x + w), T::lit(y + h))?;
            gt_box = Some(b);
            out.push(ProposalRecord {
                id: format!("{image_id}-gt"),
                image_id,
                bbox: b,
                kind: ProposalKind::GroundTruth,
                label: Some(c.id.clone()),
                split: c.split,
                max_iou: T::one(),
                embedding: Some(embed(rng, &c.direction, world.noise(1.0))?),
            });
        } else {
            let q = proposal_levels[slot - 1];
            let gt = gt_box.as_ref().expect("ground truth precedes its proposals");
            out.push(ProposalRecord {
                id: format!("{image_id}-p{slot}"),
                image_id,
                bbox: slide_box(gt, q)?,
                kind: ProposalKind::RegionProposal,
                label: None,
                split: c.split,
                max_iou: T::zero(),
                embedding: Some(embed(rng, &c.direction, world.noise(q))?),
            });
        }
    }
    Ok(out)
}

/// Orthonormal basis of the differences between base-class directions.
fn base_difference_basis<T: Scalar>(world: &PlantedWorld<T>) -> Vec<Vec<T>> {
    let base: Vec<&[T]> = world
        .classes
        .iter()
        .filter(|c| c.split == Split::Base)
        .map(|c| c.direction.as_slice())
        .collect();
    let mut basis: Vec<Vec<T>> = Vec::new();
    for u in base.iter().skip(1) {
        let mut v: Vec<T> = u.iter().zip(base[0]).map(|(&a, &b)| a - b).collect();
        for _ in 0..2 {
            for e in &basis {
                let p = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(x, &ei)| *x -= p * ei);
            }
        }
        let n = crate::scalar::norm(&v);
        if n > T::lit(1e-10) {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `n` background regions placed in the given ground-truth images.
///
/// Each embedding is a random unit vector with its component along the
/// base-class differences removed, so it is equally similar to every base
/// class, and it is rejected unless its cosine with every class is below
/// `rho`. Boxes overlap their image's ground truth with IoU at most
/// [`NEGATIVE_MAX_IOU`].
pub fn gen_negatives<T: Scalar>(
    world: &PlantedWorld<T>,
    n: usize,
    ground_truths: &[&ProposalRecord<T>],
    tag: &str,
    rng: &mut Rng,
) -> Result<Vec<ProposalRecord<T>>> {
    gen_negatives_with_budget(world, n, ground_truths, tag, rng, MAX_ATTEMPTS)
}

/// [`gen_negatives`] with at most `max_attempts` draws per negative.
pub fn gen_negatives_with_budget<T: Scalar>(
    world: &PlantedWorld<T>,
    n: usize,
    ground_truths: &[&ProposalRecord<T>],
    tag: &str,
    rng: &mut Rng,
    max_attempts: usize,
) -> Result<Vec<ProposalRecord<T>>> {
    let basis = base_difference_basis(world);
    let d = world.classes.first().map_or(0, |c| c.direction.len());
    let rho = T::lit(world.rho);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut attempts = 0;
        let f = loop {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::data(format!(
                    "no background embedding with max cosine below {} after {max_attempts} attempts; \
                     increase the embedding dimension or rho",
                    world.rho
                )));
            }
            let mut v = rng::normal_vec::<T>(rng, d, 1.0);
            for e in &basis {
                let p = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(x, &ei)| *x -= p * ei);
            }
            let Some(v) = normalized(&v) else { continue };
            if world.classes.iter().all(|c| dot(&v, &c.direction) < rho) {
                break v;
            }
        };
        let q = rng.random_range(0.0..NEGATIVE_MAX_IOU);
        let (image_id, bbox) = match ground_truths.get(i % ground_truths.len().max(1)) {
            Some(gt) => (gt.image_id.clone(), slide_box(&gt.bbox, q)?),
            None => (
                format!("{tag}-bg-img{i:04}"),
                BBox::new(T::zero(), T::zero(), T::lit(100.0), T::lit(100.0))?,
            ),
        };
        out.push(ProposalRecord {
            id: format!("{tag}-neg{i:04}"),
            image_id,
            bbox,
            kind: ProposalKind::RegionProposal,
            label: None,
            split: Split::Base,
            max_iou: T::zero(),
            embedding: Some(f),
        });
    }
    Ok(out)
}

/// Records of one benchmark split.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet<T> {
    pub records: Vec<ProposalRecord<T>>,
}

/// Training set (base classes only) and evaluation set (all classes), each
/// with its own negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark<T> {
    pub world: PlantedWorld<T>,
    pub tokens: ClassTokenTable<T>,
    pub train: SynthSet<T>,
    pub eval: SynthSet<T>,
}

fn gen_set<T: Scalar>(
    world: &PlantedWorld<T>,
    cfg: &SynthConfig,
    tag: &str,
    include_novel: bool,
) -> Result<SynthSet<T>> {
    let mut records = Vec::new();
    for (k, c) in world.classes.iter().enumerate() {
        if c.split == Split::Novel && !include_novel {
            continue;
        }
        let mut r = rng::stream(cfg.seed, tag, k as u64);
        records.extend(gen_positives(world, &c.id, cfg.positives_per_class, &IOU_LEVELS, tag, &mut r)?);
    }
    let gts: Vec<&ProposalRecord<T>> = records.iter().filter(|r| r.is_ground_truth()).collect();
    let mut r = rng::stream(cfg.seed, &format!("{tag}-negatives"), 0);
    let negatives = gen_negatives(world, cfg.negatives, &gts, tag, &mut r)?;
    records.extend(negatives);
    Ok(SynthSet { records })
}

/// The full benchmark for `cfg`, using `encoder` to plant class directions.
pub fn gen_benchmark<T: Scalar>(
    cfg: &SynthConfig,
    encoder: &FrozenTextEncoder<T>,
    context_len: usize,
) -> Result<Benchmark<T>> {
    let (world, tokens) = gen_world(cfg, encoder, context_len)?;
    let train = gen_set(&world, cfg, "train", false)?;
    let eval = gen_set(&world, cfg, "eval", true)?;
    Ok(Benchmark {
        world,
        tokens,
        train,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MAX_PROMPT_LEN;

    fn small() -> (SynthConfig, FrozenTextEncoder<f64>) {
        let cfg = SynthConfig {
            base_classes: 4,
            novel_classes: 2,
            positives_per_class: 8,
            negatives: 10,
            ..SynthConfig::default()
        };
        (cfg, FrozenTextEncoder::build(0, 16, 16, MAX_PROMPT_LEN))
    }

    #[test]
    fn slide_box_hits_target_iou() {
        let gt = BBox::new(3.0, 4.0, 103.7, 61.0).unwrap();
        for q in [0.0, 0.5, 0.6, 0.75, 0.9, 1.0] {
            let b = slide_box(&gt, q).unwrap();
            let v = iou(&b, &gt);
            assert!((v - q).abs() < 1e-6 && v >= q, "{q} -> {v}");
        }
    }

    #[test]
    fn world_is_deterministic_with_disjoint_splits() {
        let (cfg, enc) = small();
        let (a, ta) = gen_world(&cfg, &enc, 8).unwrap();
        let (b, tb) = gen_world(&cfg, &enc, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.ids(Split::Base).len(), 4);
        assert_eq!(ta.ids(Split::Novel).len(), 2);
        assert!(a.classes.iter().all(|c| (crate::scalar::norm(&c.direction) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn negatives_respect_ceiling_and_equal_base_similarity() {
        let (cfg, enc) = small();
        let (world, _) = gen_world(&cfg, &enc, 8).unwrap();
        let mut r = rng::from_seed(1);
        let negs = gen_negatives(&world, 20, &[], "t", &mut r).unwrap();
        for n in &negs {
            let f = n.embedding.as_ref().unwrap();
            let cos: Vec<f64> = world.classes.iter().map(|c| dot(f, &c.direction)).collect();
            assert!(cos.iter().all(|&c| c < 0.2));
            for c in &cos[1..4] {
                assert!((c - cos[0]).abs() < 1e-12);
            }
        }
        assert!(gen_negatives(&world, 0, &[], "t", &mut r).unwrap().is_empty());
    }
}
