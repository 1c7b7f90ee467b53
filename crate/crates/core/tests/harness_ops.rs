mod common;

use proptest::prelude::*;
use regionprompt::checkpoint::Checkpoint;
use regionprompt::config::SynthConfig;
use regionprompt::geometry::Split;
use regionprompt::harness::{classify_topk, evaluate, evaluate_params, export_embeddings, fuse_scores, import_embeddings};
use regionprompt::losses::{class_probs, ScoreVector, Temperature};
use regionprompt::prompt::TokenPosition;
use regionprompt::trainer::{init_params, train_all, Params};

/// Binomial standard deviation of a top-1 rate, counting each novel class
/// as one independent draw: all proposals of a class share one embedding.
fn chance_band(classes: usize, n_eff: usize) -> (f64, f64) {
    let p = 1.0 / classes as f64;
    let sd = (p * (1.0 - p) / n_eff as f64).sqrt();
    (p - 3.0 * sd, p + 3.0 * sd)
}

#[test]
fn planted_context_classifies_noise_free_regions_perfectly() {
    let mut config = common::seeded_config(0);
    config.synth = SynthConfig { sigma0: 0.0, ..config.synth };
    config.train.token_position = TokenPosition::End;
    let s = common::setup(config);
    let groups = [Params {
        context: s.bench.world.planted.clone(),
        background: None,
    }];
    let report = evaluate_params(&s.bench.eval.records, &groups, &s.encoder, &s.bench.tokens, &s.config.train, &s.config.hash()).unwrap();
    assert_eq!(report.base.top1, 1.0);
    assert_eq!(report.novel.top1, 1.0);
    assert_eq!(report.novel.count, 500);
}

#[test]
fn untrained_context_is_near_chance() {
    let (lo, hi) = chance_band(30, 10);
    for seed in 0..4 {
        let s = common::setup(common::seeded_config(seed));
        let init = init_params::<f64>(&s.config.train).unwrap();
        let r = evaluate_params(&s.bench.eval.records, &[init], &s.encoder, &s.bench.tokens, &s.config.train, &s.config.hash()).unwrap();
        assert!((lo..=hi).contains(&r.novel.top1), "seed {seed}: {}", r.novel.top1);
        assert!(r.novel.top5 >= r.novel.top1 && r.base.top5 >= r.base.top1);
    }
}

#[test]
fn training_and_checkpoint_round_trip() {
    let s = common::setup(common::seeded_config(0));
    let run = train_all(&s.train, &s.config.train, &s.encoder, &s.bench.tokens).unwrap();
    let ckpt = Checkpoint::from_run(&run, &s.config);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.config().unwrap(), s.config);

    let hash = s.config.hash();
    let a = evaluate_params(&s.bench.eval.records, &ckpt.params(), &s.encoder, &s.bench.tokens, &s.config.train, &hash).unwrap();
    let b = evaluate_params(&s.bench.eval.records, &back.params(), &s.encoder, &s.bench.tokens, &s.config.train, &hash).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.config_hash, regionprompt::config::hex(&hash));
    assert!(a.base.top1 > 0.5);

    let embs = run.class_embeddings(&s.encoder, &s.bench.tokens, &s.bench.tokens.all_ids()).unwrap();
    let file = dir.path().join("emb.txt");
    export_embeddings(&embs, &s.bench.tokens, &file).unwrap();
    let imported = import_embeddings::<f64>(&file).unwrap();
    assert_eq!(imported, embs);
    let via_file = evaluate(&s.bench.eval.records, &imported, &s.bench.tokens, &s.config.train, &hash).unwrap();
    assert_eq!(via_file, a);

    let novel = run.class_embeddings(&s.encoder, &s.bench.tokens, &s.bench.tokens.ids(Split::Novel)).unwrap();
    let nfile = dir.path().join("novel.txt");
    export_embeddings(&novel, &s.bench.tokens, &nfile).unwrap();
    assert_eq!(import_embeddings::<f64>(&nfile).unwrap().len(), 10);
}

#[test]
fn report_text_lines_have_three_fields() {
    let s = common::setup(common::seeded_config(1));
    let init = init_params::<f64>(&s.config.train).unwrap();
    let r = evaluate_params(&s.bench.eval.records, &[init], &s.encoder, &s.bench.tokens, &s.config.train, &s.config.hash()).unwrap();
    let text = r.to_text();
    assert!(text.lines().all(|l| l.split('\t').count() == 3));
    assert!(text.contains("top1\tnovel\t"));
    assert!(text.contains("seed_encoder\tall\t1"));
}

#[test]
fn missing_embeddings_fail_evaluation() {
    let s = common::setup(common::seeded_config(0));
    let mut recs = s.bench.eval.records.clone();
    recs[3].embedding = None;
    let init = init_params::<f64>(&s.config.train).unwrap();
    let err = evaluate_params(&recs, &[init], &s.encoder, &s.bench.tokens, &s.config.train, &s.config.hash()).unwrap_err();
    assert!(err.to_string().contains(&recs[3].id));
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn arb_scores(n: usize) -> impl Strategy<Value = ScoreVector<f64>> {
    proptest::collection::vec(0.001..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        ScoreVector(v.into_iter().map(|x| x / s).collect())
    })
}

proptest! {
    #[test]
    fn ranking_by_cosine_matches_ranking_by_probability(
        f in proptest::collection::vec(-1.0..1.0f64, 6),
        raw in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 6), 5..10),
    ) {
        prop_assume!(f.iter().any(|x| x.abs() > 1e-3));
        let embs: Vec<regionprompt::encoder::ClassEmbedding<f64>> = raw
            .iter()
            .enumerate()
            .map(|(i, v)| regionprompt::encoder::ClassEmbedding { id: format!("c{i}").as_str().into(), vector: unit(v) })
            .collect();
        let ranked = classify_topk(&f, &embs, embs.len()).unwrap();
        let vecs: Vec<&[f64]> = embs.iter().map(|e| e.vector.as_slice()).collect();
        let p = class_probs(&f, &vecs, Temperature::new(0.05).unwrap()).unwrap();
        let idx = |id: &regionprompt::geometry::ClassId| embs.iter().position(|e| &e.id == id).unwrap();
        for w in ranked.windows(2) {
            prop_assert!(p.0[idx(&w[0])] >= p.0[idx(&w[1])]);
        }
        prop_assert_eq!(idx(&ranked[0]), p.argmax());
    }

    #[test]
    fn fusion_is_a_normalized_symmetric_mean(a in arb_scores(7), b in arb_scores(7)) {
        let f = fuse_scores(&a, &b).unwrap();
        prop_assert!((f.sum() - 1.0).abs() < 1e-12);
        prop_assert!(f.0.iter().all(|&x| x > 0.0 && x <= 1.0));
        prop_assert_eq!(&f, &fuse_scores(&b, &a).unwrap());
        let same = fuse_scores(&a, &a).unwrap();
        for (x, y) in same.0.iter().zip(&a.0) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }
}
