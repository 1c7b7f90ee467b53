//! Boxes, IoU, positive/negative partitioning and IoU-graded context groups.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Slack used when comparing IoU values against interval boundaries.
///
/// Boundaries such as `0.5 + 2 * 0.1` are not exactly representable, so a
/// value within this distance below a boundary is treated as lying on it.
pub const GRADE_TOLERANCE: f64 = 1e-9;

/// Class identifier. Ordering is lexicographic and is used for tie-breaks.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub String);

impl ClassId {
    pub fn new(s: impl Into<String>) -> Self {
        ClassId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

/// Whether a class has training supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Novel => "novel",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            other => Err(Error::data(format!("unknown split {other:?}"))),
        }
    }
}

/// Axis-aligned box in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    /// Builds a box, rejecting non-finite coordinates and inverted corners.
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::data("box coordinates must be finite"));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::data(format!(
                "box corners inverted: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }
}

/// Intersection over union of two boxes.
///
/// Returns 0 whenever the union has zero area, including two identical
/// degenerate boxes.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one()).max(T::zero())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalKind {
    GroundTruth,
    RegionProposal,
}

impl ProposalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalKind::GroundTruth => "ground_truth",
            ProposalKind::RegionProposal => "region_proposal",
        }
    }
}

/// One box with its label, split and (optionally) its region embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalRecord<T> {
    pub id: String,
    pub image_id: String,
    pub bbox: BBox<T>,
    pub kind: ProposalKind,
    pub label: Option<ClassId>,
    pub split: Split,
    /// Highest IoU against a ground truth of the same image. Filled in by
    /// [`partition`]; ground truths carry 1.
    pub max_iou: T,
    pub embedding: Option<Vec<T>>,
}

impl<T: Scalar> ProposalRecord<T> {
    pub fn is_ground_truth(&self) -> bool {
        self.kind == ProposalKind::GroundTruth
    }
}

/// Positives (matched proposals plus ground truths) and negatives.
#[derive(Clone, Debug)]
pub struct ProposalPartition<T> {
    pub positives: Vec<ProposalRecord<T>>,
    pub negatives: Vec<ProposalRecord<T>>,
    pub threshold: T,
}

/// Splits proposals into positives and negatives by their best IoU against
/// the ground truths of their own image.
///
/// A proposal with `max_iou >= threshold` becomes positive and takes the
/// label of the matching ground truth; equal IoUs resolve to the ground truth
/// with the smallest id. Ground truths are always positive. Proposals in
/// images without ground truth are negative with `max_iou = 0`.
pub fn partition<T: Scalar>(
    proposals: &[ProposalRecord<T>],
    ground_truths: &[ProposalRecord<T>],
    threshold: T,
) -> Result<ProposalPartition<T>> {
    if !(threshold > T::zero() && threshold < T::one()) {
        return Err(Error::config(format!(
            "partition threshold must lie in (0, 1), got {threshold}"
        )));
    }

    let mut by_image: BTreeMap<&str, Vec<&ProposalRecord<T>>> = BTreeMap::new();
    for gt in ground_truths {
        if !gt.is_ground_truth() {
            return Err(Error::data(format!(
                "record {} passed as ground truth has kind {}",
                gt.id,
                gt.kind.as_str()
            )));
        }
        if gt.label.is_none() {
            return Err(Error::data(format!("ground truth {} has no label", gt.id)));
        }
        by_image.entry(gt.image_id.as_str()).or_default().push(gt);
    }
    for gts in by_image.values_mut() {
        gts.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let mut positives: Vec<ProposalRecord<T>> = ground_truths
        .iter()
        .map(|gt| ProposalRecord {
            max_iou: T::one(),
            ..gt.clone()
        })
        .collect();
    let mut negatives = Vec::new();

    for p in proposals {
        if p.is_ground_truth() {
            return Err(Error::data(format!(
                "record {} in the proposal list is a ground truth",
                p.id
            )));
        }
        let mut best: Option<(&ProposalRecord<T>, T)> = None;
        if let Some(gts) = by_image.get(p.image_id.as_str()) {
            for gt in gts {
                let v = iou(&p.bbox, &gt.bbox);
                match best {
                    Some((_, bv)) if v <= bv => {}
                    _ => best = Some((gt, v)),
                }
            }
        }
        match best {
            Some((gt, v)) if v >= threshold => positives.push(ProposalRecord {
                label: gt.label.clone(),
                split: gt.split,
                max_iou: v,
                ..p.clone()
            }),
            Some((_, v)) => negatives.push(ProposalRecord {
                label: None,
                max_iou: v,
                ..p.clone()
            }),
            None => negatives.push(ProposalRecord {
                label: None,
                max_iou: T::zero(),
                ..p.clone()
            }),
        }
    }

    Ok(ProposalPartition {
        positives,
        negatives,
        threshold,
    })
}

/// IoU range `[lo, hi)` split into intervals of width `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grading {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for Grading {
    fn default() -> Self {
        Grading {
            lo: 0.5,
            hi: 1.0,
            step: 0.1,
        }
    }
}

impl Grading {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        let g = Grading { lo, hi, step };
        g.num_groups()?;
        Ok(g)
    }

    /// Number of intervals, `round((hi - lo) / step)`.
    pub fn num_groups(&self) -> Result<usize> {
        let Grading { lo, hi, step } = *self;
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
            return Err(Error::config("grading bounds must be finite"));
        }
        if lo >= hi {
            return Err(Error::config(format!(
                "grading needs lo < hi, got ({lo}:{hi})"
            )));
        }
        if step <= 0.0 {
            return Err(Error::config(format!("grading step must be positive, got {step}")));
        }
        let k = ((hi - lo) / step).round();
        if k < 1.0 || (k * step - (hi - lo)).abs() > GRADE_TOLERANCE {
            return Err(Error::config(format!(
                "grading step {step} does not divide ({lo}:{hi})"
            )));
        }
        Ok(k as usize)
    }

    /// Bounds of interval `k`.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        let lo = self.lo + k as f64 * self.step;
        let n = self.num_groups().unwrap_or(1);
        let hi = if k + 1 == n {
            self.hi
        } else {
            self.lo + (k + 1) as f64 * self.step
        };
        (lo, hi)
    }

    /// Interval index for an IoU value, or `None` when outside `[lo, hi]`.
    pub fn index_of(&self, v: f64) -> Option<usize> {
        let n = self.num_groups().ok()?;
        if v < self.lo - GRADE_TOLERANCE || v > self.hi + GRADE_TOLERANCE {
            return None;
        }
        let k = ((v - self.lo + GRADE_TOLERANCE) / self.step).floor();
        Some((k.max(0.0) as usize).min(n - 1))
    }
}

/// Positives whose IoU falls in one grading interval.
#[derive(Clone, Debug)]
pub struct ContextGroup<T> {
    pub lo: f64,
    pub hi: f64,
    pub members: Vec<ProposalRecord<T>>,
}

/// Assigns each positive to the interval containing its `max_iou`.
///
/// Intervals are half-open except the last, which includes `hi`. Positives
/// below `lo` (or above `hi`) are dropped. With `gt_in_all_groups` every
/// ground truth is additionally placed in every group.
pub fn grade<T: Scalar>(
    partition: &ProposalPartition<T>,
    grading: &Grading,
    gt_in_all_groups: bool,
) -> Result<Vec<ContextGroup<T>>> {
    let n = grading.num_groups()?;
    let mut groups: Vec<ContextGroup<T>> = (0..n)
        .map(|k| {
            let (lo, hi) = grading.interval(k);
            ContextGroup {
                lo,
                hi,
                members: Vec::new(),
            }
        })
        .collect();
    for p in &partition.positives {
        if gt_in_all_groups && p.is_ground_truth() {
            for g in groups.iter_mut() {
                g.members.push(p.clone());
            }
            continue;
        }
        if let Some(k) = grading.index_of(p.max_iou.to_f64_lossless()) {
            groups[k].members.push(p.clone());
        }
    }
    Ok(groups)
}

/// Draws `floor(fraction * |negatives|)` records without replacement.
///
/// The selection keeps the input order. `fraction = 1` returns the input
/// unchanged.
pub fn subsample_negatives<T: Scalar>(
    negatives: &[ProposalRecord<T>],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ProposalRecord<T>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "negative fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(negatives.to_vec());
    }
    let n = negatives.len();
    let count = ((fraction * n as f64) + GRADE_TOLERANCE).floor() as usize;
    let mut rng = rng::stream(seed, "negatives", 0);
    let mut picked = rand::seq::index::sample(&mut rng, n, count.min(n)).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| negatives[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(id: &str, image: &str, b: BBox<f64>, label: &str) -> ProposalRecord<f64> {
        ProposalRecord {
            id: id.into(),
            image_id: image.into(),
            bbox: b,
            kind: ProposalKind::GroundTruth,
            label: Some(label.into()),
            split: Split::Base,
            max_iou: 1.0,
            embedding: None,
        }
    }

    fn prop(id: &str, image: &str, b: BBox<f64>) -> ProposalRecord<f64> {
        ProposalRecord {
            id: id.into(),
            image_id: image.into(),
            bbox: b,
            kind: ProposalKind::RegionProposal,
            label: None,
            split: Split::Base,
            max_iou: 0.0,
            embedding: None,
        }
    }

    #[test]
    fn iou_closed_forms() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &bx(5.0, 0.0, 15.0, 10.0)) - 50.0 / 150.0).abs() < 1e-15);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &bx(2.0, 2.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn partition_examples() {
        let g = gt("g0", "im", bx(0.0, 0.0, 10.0, 10.0), "cat");
        let near = prop("p0", "im", bx(1.0, 0.0, 11.0, 10.0));
        let far = prop("p1", "im", bx(8.0, 8.0, 18.0, 18.0));
        let part = partition(&[near, far], &[g], 0.5).unwrap();
        assert_eq!(part.positives.len(), 2);
        let p = &part.positives[1];
        assert_eq!(p.label.as_ref().unwrap().as_str(), "cat");
        assert!((p.max_iou - 90.0 / 110.0).abs() < 1e-15);
        assert_eq!(part.negatives.len(), 1);
        assert!((part.negatives[0].max_iou - 4.0 / 196.0).abs() < 1e-15);
    }

    #[test]
    fn empty_proposals_give_ground_truths_only() {
        let g = gt("g0", "im", bx(0.0, 0.0, 10.0, 10.0), "cat");
        let part = partition(&[], &[g], 0.5).unwrap();
        assert_eq!(part.positives.len(), 1);
        assert!(part.negatives.is_empty());
    }

    #[test]
    fn orphan_proposal_is_negative() {
        let g = gt("g0", "im", bx(0.0, 0.0, 10.0, 10.0), "cat");
        let part = partition(&[prop("p", "other", bx(0.0, 0.0, 10.0, 10.0))], &[g], 0.5).unwrap();
        assert_eq!(part.negatives.len(), 1);
        assert_eq!(part.negatives[0].max_iou, 0.0);
    }

    #[test]
    fn argmax_ties_prefer_lowest_ground_truth_id() {
        let a = gt("g1", "im", bx(0.0, 0.0, 10.0, 10.0), "left");
        let b = gt("g0", "im", bx(2.0, 0.0, 12.0, 10.0), "right");
        let p = prop("p", "im", bx(1.0, 0.0, 11.0, 10.0));
        let part = partition(&[p], &[a, b], 0.5).unwrap();
        assert_eq!(part.positives[2].label.as_ref().unwrap().as_str(), "right");
    }

    #[test]
    fn grading_boundaries() {
        let g = Grading::default();
        assert_eq!(g.num_groups().unwrap(), 5);
        assert_eq!(g.index_of(0.6), Some(1));
        assert_eq!(g.index_of(0.7), Some(2));
        assert_eq!(g.index_of(1.0), Some(4));
        assert_eq!(g.index_of(0.4999), None);
        assert!(Grading::new(0.5, 1.0, 0.3).is_err());
        assert!(Grading::new(0.5, 1.0, 0.0).is_err());
        assert!(Grading::new(1.0, 0.5, 0.1).is_err());
    }

    #[test]
    fn subsample_counts() {
        let negs: Vec<_> = (0..100)
            .map(|i| prop(&format!("n{i}"), "im", bx(0.0, 0.0, 1.0, 1.0)))
            .collect();
        let s = subsample_negatives(&negs, 0.1, 7).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s, subsample_negatives(&negs, 0.1, 7).unwrap());
        assert_eq!(subsample_negatives(&negs, 0.29, 7).unwrap().len(), 29);
        assert_eq!(subsample_negatives(&negs, 1.0, 7).unwrap(), negs);
        assert!(subsample_negatives::<f64>(&[], 0.5, 1).unwrap().is_empty());
        assert!(subsample_negatives(&negs, 0.0, 1).is_err());
    }
}
