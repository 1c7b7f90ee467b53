#![allow(dead_code)]

use rand::Rng;
use regionprompt::config::Config;
use regionprompt::dataset::split_by_kind;
use regionprompt::geometry::{partition, BBox, ProposalKind, ProposalPartition, ProposalRecord, Split};
use regionprompt::synth::{gen_benchmark, Benchmark};
use regionprompt::trainer::build_encoder;
use regionprompt::Encoder;

/// Configuration with every seed set to `seed`.
pub fn seeded_config(seed: u64) -> Config {
    let mut c = Config::default();
    c.synth.seed = seed;
    c.train.seeds.init = seed;
    c.train.seeds.data = seed;
    c.train.seeds.encoder = seed;
    c
}

pub struct Setup {
    pub config: Config,
    pub encoder: Encoder,
    pub bench: Benchmark<f64>,
    pub train: ProposalPartition<f64>,
}

/// The default benchmark for `config`, with the training set partitioned.
pub fn setup(config: Config) -> Setup {
    let encoder = build_encoder::<f64>(&config.train);
    let bench = gen_benchmark(&config.synth, &encoder, config.train.context_len).unwrap();
    let (gts, props) = split_by_kind(bench.train.records.clone());
    let train = partition(&props, &gts, config.train.iou_threshold).unwrap();
    Setup {
        config,
        encoder,
        bench,
        train,
    }
}

fn rect(rng: &mut impl Rng) -> BBox<f64> {
    // Coordinates on a coarse grid so exact ties and shared edges occur.
    let x1 = rng.random_range(0..20) as f64 * 0.5;
    let y1 = rng.random_range(0..20) as f64 * 0.5;
    let w = rng.random_range(0..12) as f64 * 0.5;
    let h = rng.random_range(0..12) as f64 * 0.5;
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// A random scene of at most 50 boxes over three images.
pub fn random_scene(rng: &mut impl Rng) -> (Vec<ProposalRecord<f64>>, Vec<ProposalRecord<f64>>) {
    let n_gt = rng.random_range(0..10);
    let n_prop = rng.random_range(0..=(50 - n_gt));
    let image = |rng: &mut dyn rand::RngCore| format!("img{}", rng.random_range(0..3));
    let gts = (0..n_gt)
        .map(|i| ProposalRecord {
            id: format!("g{:02}", rng.random_range(0..100) * 100 + i),
            image_id: image(rng),
            bbox: rect(rng),
            kind: ProposalKind::GroundTruth,
            label: Some(format!("c{}", rng.random_range(0..4)).as_str().into()),
            split: Split::Base,
            max_iou: 1.0,
            embedding: None,
        })
        .collect();
    let props = (0..n_prop)
        .map(|i| ProposalRecord {
            id: format!("p{i}"),
            image_id: image(rng),
            bbox: rect(rng),
            kind: ProposalKind::RegionProposal,
            label: None,
            split: Split::Base,
            max_iou: 0.0,
            embedding: None,
        })
        .collect();
    (gts, props)
}

fn oracle_iou(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Oracle partition: labelled positives and unlabelled negatives.
pub type OraclePartition = (Vec<(String, String, f64)>, Vec<(String, f64)>);

/// Pairwise IoU, then threshold: (id, label, max_iou) for every positive
/// proposal and (id, max_iou) for every negative.
pub fn brute_force_partition(
    gts: &[ProposalRecord<f64>],
    props: &[ProposalRecord<f64>],
    threshold: f64,
) -> OraclePartition {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in props {
        let mut best: Option<(f64, &ProposalRecord<f64>)> = None;
        for g in gts.iter().filter(|g| g.image_id == p.image_id) {
            let v = oracle_iou(&p.bbox, &g.bbox);
            best = match best {
                None => Some((v, g)),
                Some((bv, bg)) if v > bv || (v == bv && g.id < bg.id) => Some((v, g)),
                keep => keep,
            };
        }
        match best {
            Some((v, g)) if v >= threshold => {
                pos.push((p.id.clone(), g.label.as_ref().unwrap().to_string(), v))
            }
            Some((v, _)) => neg.push((p.id.clone(), v)),
            None => neg.push((p.id.clone(), 0.0)),
        }
    }
    (pos, neg)
}
