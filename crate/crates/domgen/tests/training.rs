//! End-to-end behavior of the episodic trainer and its variants on small
//! synthetic corpora: loss structure, determinism, gradient correctness of
//! the composite objective, and the documented variant differences.

use domgen::data::{build_rotation_domains, generate_glyph_corpus, MultiDomainCorpus};
use domgen::eval::{EvalMode, InferenceContext};
use domgen::trainer::{
    build_step_loss, history_to_csv, smoothed_total, train, MethodSpec, StepBatch, TrainConfig,
};
use numcore::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL_WIDTHS: [usize; 3] = [784, 32, 16];

fn small_corpus(per_class: usize, seed: u64) -> MultiDomainCorpus {
    let base = generate_glyph_corpus(per_class, seed);
    build_rotation_domains(&base, &[15.0, 30.0, 60.0], &[0.0], 0.2).unwrap()
}

fn small_config(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: 16,
        support_per_class: 3,
        val_every: 10,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn tiny_run_completes_with_full_history_and_nonnegative_kl() {
    let corpus = small_corpus(12, 41);
    let cfg = small_config(20, 7);
    let out = train::<f32>(&corpus, &MethodSpec::full(), &cfg, &SMALL_WIDTHS).unwrap();

    assert_eq!(out.history.len(), 20);
    for rec in &out.history {
        assert!(rec.loss.kl >= 0.0, "kl {} < 0 at iter {}", rec.loss.kl, rec.iteration);
        assert!(rec.loss.total.is_finite());
        assert!(rec.loss.ce_posterior.is_finite());
        assert!(rec.loss.ce_prior.is_finite());
    }
    assert!(out.history.iter().filter(|r| r.val_accuracy.is_some()).count() == 2);
    assert!(out.best_val_accuracy >= 0.0 && out.best_val_accuracy <= 1.0);
}

#[test]
fn identical_seed_and_config_reproduce_history_bitwise() {
    let corpus = small_corpus(10, 42);
    let cfg = small_config(12, 3);
    let a = train::<f32>(&corpus, &MethodSpec::full(), &cfg, &SMALL_WIDTHS).unwrap();
    let b = train::<f32>(&corpus, &MethodSpec::full(), &cfg, &SMALL_WIDTHS).unwrap();
    assert_eq!(history_to_csv(&a.history), history_to_csv(&b.history));
    assert_eq!(a.best_val_accuracy.to_bits(), b.best_val_accuracy.to_bits());
}

#[test]
fn different_seeds_diverge() {
    let corpus = small_corpus(10, 42);
    let a = train::<f32>(&corpus, &MethodSpec::full(), &small_config(8, 1), &SMALL_WIDTHS)
        .unwrap();
    let b = train::<f32>(&corpus, &MethodSpec::full(), &small_config(8, 2), &SMALL_WIDTHS)
        .unwrap();
    assert_ne!(history_to_csv(&a.history), history_to_csv(&b.history));
}

#[test]
fn episodic_training_rejects_single_source_domain() {
    let base = generate_glyph_corpus(10, 5);
    let corpus = build_rotation_domains(&base, &[15.0], &[0.0], 0.2).unwrap();
    let msg = match train::<f32>(&corpus, &MethodSpec::full(), &small_config(5, 0), &SMALL_WIDTHS)
    {
        Ok(_) => panic!("single-source episodic training should fail"),
        Err(e) => e.to_string(),
    };
    assert!(msg.contains("split_domains"), "unexpected message: {}", msg);
}

#[test]
fn prior_supervision_toggle_removes_the_prior_ce_term() {
    let corpus = small_corpus(10, 43);
    let cfg = small_config(6, 11);
    let spec = MethodSpec { prior_supervision: false, ..MethodSpec::full() };
    let out = train::<f32>(&corpus, &spec, &cfg, &SMALL_WIDTHS).unwrap();
    for rec in &out.history {
        assert_eq!(rec.loss.ce_prior, 0.0);
        assert!(rec.loss.kl >= 0.0);
    }
}

#[test]
fn invariant_variant_generates_one_classifier_for_all_samples() {
    let corpus = small_corpus(10, 44);
    let cfg = small_config(8, 13);
    let spec = MethodSpec {
        hierarchical: false,
        prior_supervision: false,
        sample_conditioning: false,
        episodic: true,
    };
    let out = train::<f32>(&corpus, &spec, &cfg, &SMALL_WIDTHS).unwrap();
    let ctx = InferenceContext::new(
        &out.best,
        &corpus,
        spec,
        EvalMode::Deterministic,
        cfg.support_per_class,
        99,
    )
    .unwrap();
    // Same classifier for every sample: logits differ only through φ(x),
    // which we can't see directly, but two identical images must agree and
    // the context must report the variant's fixed-classifier path by
    // construction. Check pure functional behavior on repeated calls.
    let img = &corpus.targets[0].train[0];
    let (l1, g1) = ctx.predict_single(&img.pixels).unwrap();
    let (l2, g2) = ctx.predict_single(&img.pixels).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

#[test]
fn history_csv_has_stable_header_and_blank_unmeasured_accuracy() {
    let corpus = small_corpus(10, 45);
    let cfg = small_config(10, 17);
    let out = train::<f32>(&corpus, &MethodSpec::full(), &cfg, &SMALL_WIDTHS).unwrap();
    let csv = history_to_csv(&out.history);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,ce_posterior,ce_prior,kl,total,val_accuracy"
    );
    let first = lines.next().unwrap();
    assert!(first.ends_with(','), "iteration 1 has no validation: {}", first);
    let line10 = csv.lines().nth(10).unwrap();
    assert!(!line10.ends_with(','), "iteration 10 validated: {}", line10);
}

#[test]
fn smoothed_total_averages_over_the_window() {
    use domgen::trainer::{HistoryRecord, LossBreakdown};
    let history: Vec<HistoryRecord> = (1..=5)
        .map(|i| HistoryRecord {
            iteration: i,
            loss: LossBreakdown {
                ce_posterior: 0.0,
                ce_prior: 0.0,
                kl: 0.0,
                total: i as f64,
            },
            val_accuracy: None,
        })
        .collect();
    let sm = smoothed_total(&history, 3);
    assert_eq!(sm, vec![1.0, 1.5, 2.0, 3.0, 4.0]);
}

#[test]
fn non_meta_variant_trains_without_episodes() {
    let corpus = small_corpus(10, 46);
    let cfg = small_config(6, 19);
    let spec = MethodSpec { episodic: false, ..MethodSpec::full() };
    let out = train::<f32>(&corpus, &spec, &cfg, &SMALL_WIDTHS).unwrap();
    assert_eq!(out.history.len(), 6);
    for rec in &out.history {
        assert!(rec.loss.kl >= 0.0);
        assert!(rec.loss.ce_prior.is_finite());
        assert!(rec.loss.ce_prior != 0.0, "non-meta keeps the prior CE term");
    }
}

#[test]
fn non_meta_variant_runs_on_a_single_source_domain() {
    let base = generate_glyph_corpus(10, 6);
    let corpus = build_rotation_domains(&base, &[15.0], &[0.0], 0.2).unwrap();
    let spec = MethodSpec { episodic: false, ..MethodSpec::full() };
    let out = train::<f32>(&corpus, &spec, &small_config(4, 23), &SMALL_WIDTHS).unwrap();
    assert_eq!(out.history.len(), 4);
}

#[test]
fn composite_loss_gradient_matches_finite_differences() {
    // f64 everywhere; a 2-class, 2-source-domain toy episode with feature
    // dimension 4 and a query batch of 4. The same builder used by
    // training is driven twice per parameter perturbation with an
    // identically reseeded rng, so the Monte Carlo draws match and the
    // finite-difference quotient estimates the true gradient. Inputs are a
    // center crop (real stroke content) and biases are nudged off zero so
    // no relu pre-activation sits exactly on its kink.
    use domgen::model::GenerativeModel;
    use rand_distr::{Distribution, Normal};

    let widths = [16usize, 8, 4];
    let base: Vec<_> = generate_glyph_corpus(8, 77)
        .into_iter()
        .filter(|s| s.label < 2)
        .collect();
    // Keep a 4×4 center crop as the 16 model inputs.
    let crop = |corpus: MultiDomainCorpus| -> MultiDomainCorpus {
        let mut c = corpus;
        for dom in c.sources.iter_mut().chain(c.targets.iter_mut()) {
            for s in dom.train.iter_mut().chain(dom.val.iter_mut()) {
                let mut kept = Vec::with_capacity(16);
                for r in 11..15 {
                    for col in 11..15 {
                        kept.push(s.pixels[r * 28 + col]);
                    }
                }
                s.pixels = kept;
            }
        }
        c
    };
    let corpus = crop(build_rotation_domains(&base, &[15.0, 75.0], &[0.0], 0.2).unwrap());

    let cfg = TrainConfig {
        iterations: 1,
        batch: 4,
        support_per_class: 2,
        mc_m: 2,
        mc_n: 2,
        mc_l: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let spec = MethodSpec::full();
    let mut init_rng = ChaCha8Rng::seed_from_u64(99);
    let mut model = GenerativeModel::<f64>::new(&mut init_rng, &widths).unwrap();
    {
        let normal = Normal::new(0.0, 0.05).unwrap();
        let GenerativeModel { backbone, psi, theta_a } = &mut model;
        let mut params = backbone.params_mut();
        params.extend(psi.params_mut());
        params.extend(theta_a.params_mut());
        for p in params {
            if p.shape.len() == 1 {
                for v in &mut p.data {
                    *v += normal.sample(&mut init_rng);
                }
            }
        }
    }

    let batch = {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        StepBatch::<f64>::sample(&corpus, &spec, &cfg, &mut rng).unwrap()
    };

    let loss_at = |model: &GenerativeModel<f64>| -> f64 {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4321);
        let (loss, _) = build_step_loss(&mut tape, model, &batch, &spec, &cfg, &mut rng).unwrap();
        loss.total.item()
    };

    // Analytic gradients once.
    let (analytic, leaf_sizes): (Vec<Vec<f64>>, Vec<usize>) = {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4321);
        let (loss, binds) =
            build_step_loss(&mut tape, &model, &batch, &spec, &cfg, &mut rng).unwrap();
        let grads = tape.backward(&loss.total).unwrap();
        let mut leaves = binds.backbone.leaves();
        leaves.extend(binds.psi.leaves());
        leaves.extend(binds.theta_a.leaves());
        let g: Vec<Vec<f64>> = leaves.iter().map(|l| grads.wrt_dense(l)).collect();
        let sizes = leaves.iter().map(|l| l.len()).collect();
        (g, sizes)
    };

    fn set_param(model: &mut GenerativeModel<f64>, pi: usize, j: usize, value: f64) -> f64 {
        let GenerativeModel { backbone, psi, theta_a } = model;
        let mut params = backbone.params_mut();
        params.extend(psi.params_mut());
        params.extend(theta_a.params_mut());
        let slot = &mut params[pi].data[j];
        let old = *slot;
        *slot = value;
        old
    }

    let mut max_rel = 0.0f64;
    // Small enough that no relu pre-activation flips sign inside ±h at
    // this fixed seed; still far above f64 quotient noise (~1e-7 here).
    let h = 1e-6;
    let mut worst = Vec::new();
    // Probe a spread of coordinates in every parameter tensor.
    for (pi, n) in leaf_sizes.iter().enumerate() {
        let probes = [0, n / 2, n - 1];
        for &j in &probes {
            let orig = set_param(&mut model, pi, j, 0.0);
            set_param(&mut model, pi, j, orig + h);
            let up = loss_at(&model);
            set_param(&mut model, pi, j, orig - h);
            let down = loss_at(&model);
            set_param(&mut model, pi, j, orig);
            let fd = (up - down) / (2.0 * h);
            let an = analytic[pi][j];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            let rel = (an - fd).abs() / denom;
            if rel > 1e-5 {
                worst.push((pi, j, rel, an, fd));
            }
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    worst.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    for w in worst.iter().take(8) {
        eprintln!("param {} coord {}: rel {:.3e} analytic {:.6e} fd {:.6e}", w.0, w.1, w.2, w.3, w.4);
    }
    assert!(max_rel < 1e-4, "max relative gradient error {}", max_rel);
}
