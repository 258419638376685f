//! Tests for the experiment runners: stream construction, the rotation
//! benchmark's report schema, the split-strategy study, and the adaptation
//! comparison grid.

use std::collections::BTreeSet;

use domgen::baselines::StreamMode;
use domgen::data::{build_rotation_domains, generate_glyph_corpus, MultiDomainCorpus};
use domgen::experiments::{
    build_streams, build_tagged_pool, run_rotation_benchmark, run_split_study,
    run_tent_comparison, SplitStudyPlan, StreamSpec, TentComparisonPlan,
};
use domgen::trainer::{MethodSpec, TrainConfig};

const TINY_WIDTHS: [usize; 3] = [784, 16, 8];

fn tiny_corpus() -> MultiDomainCorpus {
    let base = generate_glyph_corpus(10, 99);
    build_rotation_domains(&base, &[15.0, 60.0], &[0.0, 90.0], 0.2).unwrap()
}

fn tiny_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: 8,
        support_per_class: 2,
        val_every: iterations.max(1),
        ..TrainConfig::default()
    }
}

// ── Stream construction ─────────────────────────────────────────────────

#[test]
fn single_domain_streams_cover_each_target_exactly_once() {
    let corpus = tiny_corpus();
    let spec = StreamSpec { mode: StreamMode::SingleDomain, shuffle_seed: 3 };
    let streams = build_streams(&corpus, spec).unwrap();

    assert_eq!(streams.len(), corpus.targets.len());
    for (t, stream) in streams.iter().enumerate() {
        assert_eq!(stream.label, corpus.targets[t].id);
        let n = corpus.targets[t].train.len();
        assert_eq!(stream.order.len(), n);
        assert!(stream.order.iter().all(|&(ti, _)| ti == t), "stream mixes targets");
        let seen: BTreeSet<usize> = stream.order.iter().map(|&(_, i)| i).collect();
        assert_eq!(seen.len(), n, "order must be a permutation");
        assert!(stream.order.windows(2).any(|w| w[0].1 > w[1].1), "order should be shuffled");
    }

    // Same spec, same streams.
    let again = build_streams(&corpus, spec).unwrap();
    for (a, b) in streams.iter().zip(&again) {
        assert_eq!(a.order, b.order);
    }
}

#[test]
fn multi_domain_stream_interleaves_every_target() {
    let corpus = tiny_corpus();
    let spec = StreamSpec { mode: StreamMode::MultiDomain, shuffle_seed: 3 };
    let streams = build_streams(&corpus, spec).unwrap();

    assert_eq!(streams.len(), 1);
    let stream = &streams[0];
    assert_eq!(stream.label, "mixed");
    let total: usize = corpus.targets.iter().map(|d| d.train.len()).sum();
    assert_eq!(stream.order.len(), total);

    let targets_seen: BTreeSet<usize> = stream.order.iter().map(|&(t, _)| t).collect();
    assert_eq!(targets_seen.len(), corpus.targets.len(), "every target appears");

    // Interleaved: the first target's samples must not sit in one block.
    let first_block_len = stream.order.iter().take_while(|&&(t, _)| t == 0).count();
    assert!(first_block_len < corpus.targets[0].train.len());
}

#[test]
fn streams_require_target_domains() {
    let mut corpus = tiny_corpus();
    corpus.targets.clear();
    let spec = StreamSpec { mode: StreamMode::SingleDomain, shuffle_seed: 0 };
    assert!(build_streams(&corpus, spec).is_err());
}

// ── Rotation benchmark ──────────────────────────────────────────────────

#[test]
fn rotation_benchmark_reports_id_and_ood_rows_per_seed() {
    let corpus = tiny_corpus();
    let report = run_rotation_benchmark::<f32>(
        &corpus,
        MethodSpec::full(),
        "ours",
        &tiny_train(4),
        &TINY_WIDTHS,
        &[0, 1],
    )
    .unwrap();

    let id_rows: Vec<_> = report.rows.iter().filter(|r| r.experiment == "rotation-id").collect();
    let ood_rows: Vec<_> =
        report.rows.iter().filter(|r| r.experiment == "rotation-ood").collect();
    assert_eq!(id_rows.len(), corpus.sources.len() * 2, "one ID row per source per seed");
    assert_eq!(ood_rows.len(), corpus.targets.len() * 2, "one OOD row per target per seed");
    assert!(report.rows.iter().all(|r| r.method == "ours"));
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));

    let id_domains: BTreeSet<&str> = id_rows.iter().map(|r| r.target_domain.as_str()).collect();
    let want: BTreeSet<&str> = corpus.sources.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(id_domains, want);
}

// ── Split-strategy study ────────────────────────────────────────────────

#[test]
fn tagged_pool_is_angle_major_with_ground_truth_tags() {
    let base = generate_glyph_corpus(3, 5);
    let (pool, tags) = build_tagged_pool(&base, &[15.0, 60.0]);
    assert_eq!(pool.len(), base.len() * 2);
    assert_eq!(tags.len(), pool.len());
    assert!(tags[..base.len()].iter().all(|t| t == "rot15"));
    assert!(tags[base.len()..].iter().all(|t| t == "rot60"));
    // Base order preserved within each angle block.
    for (i, s) in base.iter().enumerate() {
        assert_eq!(pool[i].label, s.label);
        assert_eq!(pool[base.len() + i].label, s.label);
    }
}

#[test]
fn split_study_reports_all_three_strategies_on_shared_targets() {
    // Maximally distinct source rotations so the cluster arm cleanly
    // rediscovers the angle grouping even on a small pool.
    let base = generate_glyph_corpus(20, 4242);
    let plan = SplitStudyPlan {
        base: &base,
        source_angles: &[0.0, 90.0],
        target_angles: &[45.0],
        val_fraction: 0.2,
        train: tiny_train(4),
        widths: TINY_WIDTHS.to_vec(),
        seeds: vec![0],
    };
    let report = run_split_study::<f32>(&plan).unwrap();

    assert!(report.rows.iter().all(|r| r.experiment == "split-study"));
    let methods: BTreeSet<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    let want: BTreeSet<&str> =
        ["split-annotation", "split-cluster", "split-random"].into_iter().collect();
    assert_eq!(methods, want);
    // One row per (strategy, target, seed).
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.target_domain == "rot45"));
}

// ── Adaptation comparison ───────────────────────────────────────────────

#[test]
fn tent_comparison_emits_ours_plus_the_full_grid_per_stream() {
    let corpus = tiny_corpus();
    let plan = TentComparisonPlan {
        train: tiny_train(4),
        widths: TINY_WIDTHS.to_vec(),
        seeds: vec![0],
        batch_sizes: vec![4, 16],
        step_counts: vec![1, 2],
        lr: 1e-3,
        shuffle_seed: 11,
    };
    let report = run_tent_comparison::<f32>(&corpus, &plan).unwrap();

    let single: Vec<_> = report.rows.iter().filter(|r| r.experiment == "tent-single").collect();
    let multi: Vec<_> = report.rows.iter().filter(|r| r.experiment == "tent-multi").collect();

    // Per stream: one "ours" row plus one row per (batch, steps) pair.
    let per_stream = 1 + 2 * 2;
    assert_eq!(single.len(), corpus.targets.len() * per_stream);
    assert_eq!(multi.len(), per_stream);
    assert!(multi.iter().all(|r| r.target_domain == "mixed"));

    let methods: BTreeSet<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    let want: BTreeSet<&str> =
        ["ours", "tent-b4-s1", "tent-b4-s2", "tent-b16-s1", "tent-b16-s2"]
            .into_iter()
            .collect();
    assert_eq!(methods, want);

    // The per-sample method's accuracy on a stream equals its accuracy on
    // the target it came from, independent of ordering or batching.
    for target in &corpus.targets {
        let ours: Vec<_> = single
            .iter()
            .filter(|r| r.method == "ours" && r.target_domain == target.id)
            .collect();
        assert_eq!(ours.len(), 1);
    }
}
