//! Tests for the evaluation layer: frozen inference contexts, the metrics
//! table with its CSV/JSON forms, and the 2-D projection used by the
//! feature/classifier scatter plots.

use domgen::data::{build_rotation_domains, generate_glyph_corpus, MultiDomainCorpus};
use domgen::eval::{
    argmax, export_scatter, project_2d, scatter_svg, EvalMode, InferenceContext, MetricsReport,
};
use domgen::model::GenerativeModel;
use domgen::trainer::MethodSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EVAL_WIDTHS: [usize; 3] = [784, 16, 8];

fn eval_corpus() -> MultiDomainCorpus {
    let base = generate_glyph_corpus(10, 414);
    build_rotation_domains(&base, &[10.0, 50.0], &[0.0], 0.25).unwrap()
}

fn fresh_context(mode: EvalMode) -> InferenceContext<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let model = GenerativeModel::<f32>::new(&mut rng, &EVAL_WIDTHS).unwrap();
    let corpus = eval_corpus();
    InferenceContext::new(&model, &corpus, MethodSpec::full(), mode, 3, 99).unwrap()
}

// ── Inference context ───────────────────────────────────────────────────

#[test]
fn predictions_are_deterministic_with_normalized_probabilities() {
    let ctx = fresh_context(EvalMode::Deterministic);
    let corpus = eval_corpus();
    let img = &corpus.targets[0].train[0];

    let (label_a, logits_a) = ctx.predict_single(&img.pixels).unwrap();
    let (label_b, logits_b) = ctx.predict_single(&img.pixels).unwrap();
    assert_eq!(label_a, label_b);
    assert_eq!(logits_a, logits_b, "repeat calls must agree bitwise");

    // Softmax of the returned logits is a proper distribution.
    let max = logits_a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits_a.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let sum: f64 = probs.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6, "softmax sums to {sum}");
    assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert_eq!(argmax(&logits_a), label_a);
    assert_eq!(logits_a.len(), ctx.n_classes());
}

#[test]
fn two_contexts_built_from_the_same_state_predict_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    let model = GenerativeModel::<f32>::new(&mut rng, &EVAL_WIDTHS).unwrap();
    let corpus = eval_corpus();
    let a = InferenceContext::new(&model, &corpus, MethodSpec::full(), EvalMode::Deterministic, 3, 4)
        .unwrap();
    let b = InferenceContext::new(&model, &corpus, MethodSpec::full(), EvalMode::Deterministic, 3, 4)
        .unwrap();
    for img in corpus.targets[0].train.iter().take(10) {
        let (la, pa) = a.predict_single(&img.pixels).unwrap();
        let (lb, pb) = b.predict_single(&img.pixels).unwrap();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
    }
}

#[test]
fn sampled_predictions_depend_only_on_context_and_image_bytes() {
    let ctx = fresh_context(EvalMode::Sampled { seed: 31 });
    let corpus = eval_corpus();
    let imgs = &corpus.targets[0].train;

    // Prediction for image 0 must be identical whether or not other images
    // were scored in between: no hidden stream state.
    let first = ctx.predict_single(&imgs[0].pixels).unwrap();
    for img in imgs.iter().take(5) {
        ctx.predict_single(&img.pixels).unwrap();
    }
    let again = ctx.predict_single(&imgs[0].pixels).unwrap();
    assert_eq!(first, again, "sampled prediction must be a pure function of the image");

    // A different draw seed is allowed to move the probabilities.
    let other = fresh_context(EvalMode::Sampled { seed: 32 });
    let moved = (0..imgs.len().min(10))
        .any(|i| other.predict_single(&imgs[i].pixels).unwrap().1 != ctx.predict_single(&imgs[i].pixels).unwrap().1);
    assert!(moved, "changing the sampling seed never changed any probability");
}

#[test]
fn context_rejects_wrong_input_dimension_and_empty_batches() {
    let ctx = fresh_context(EvalMode::Deterministic);
    assert!(ctx.predict_single(&[0.0; 13]).is_err());
    assert!(ctx.accuracy(std::iter::empty()).is_err());
}

#[test]
fn context_reports_missing_support_samples_clearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let model = GenerativeModel::<f32>::new(&mut rng, &EVAL_WIDTHS).unwrap();
    let corpus = eval_corpus();
    let per_class_train = corpus.sources[0].train_by_class()[0].len();
    let err = InferenceContext::new(
        &model,
        &corpus,
        MethodSpec::full(),
        EvalMode::Deterministic,
        per_class_train + 50,
        0,
    )
    .err()
    .expect("oversized support request must fail");
    assert!(err.to_string().contains("evaluation support set"), "got: {err}");
}

#[test]
fn argmax_returns_the_first_maximum() {
    assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0, "ties resolve to the first index");
    assert_eq!(argmax(&[-3.0]), 0);
}

// ── Metrics table ───────────────────────────────────────────────────────

fn sample_report() -> MetricsReport {
    let mut r = MetricsReport::new();
    r.push("rotation-ood", "ours", "rot75", 0, 0.625);
    r.push("rotation-ood", "ours", "rot75", 1, 0.8125);
    r.push("rotation-ood", "ours", "rot90", 0, 0.5);
    r.push("rotation-ood", "ours", "rot90", 1, 0.75);
    r.push("rotation-ood", "erm", "rot75", 0, 0.4375);
    r
}

#[test]
fn metrics_csv_round_trips_raw_rows_bitwise() {
    let mut r = sample_report();
    r.push("x", "y", "z", 3, 0.12345678901234567);
    let parsed = MetricsReport::from_csv(&r.to_csv()).unwrap();
    assert_eq!(parsed, r);
    let bits_in = r.rows.last().unwrap().accuracy.to_bits();
    let bits_out = parsed.rows.last().unwrap().accuracy.to_bits();
    assert_eq!(bits_in, bits_out, "accuracy must survive the CSV round trip bitwise");
}

#[test]
fn csv_has_the_documented_header_and_aggregate_rows_are_skipped_on_parse() {
    let r = sample_report();
    let csv = r.to_csv();
    assert!(csv.starts_with("experiment,method,target_domain,seed,accuracy\n"));
    assert!(csv.contains(",mean,"), "aggregate mean rows belong in the CSV");
    assert!(csv.contains(",std,"), "aggregate std rows belong in the CSV");
    let parsed = MetricsReport::from_csv(&csv).unwrap();
    assert_eq!(parsed.rows.len(), r.rows.len(), "aggregates must not parse as raw rows");
}

#[test]
fn from_csv_rejects_foreign_headers_and_short_rows() {
    assert!(MetricsReport::from_csv("a,b,c\n1,2,3\n").is_err());
    let bad = "experiment,method,target_domain,seed,accuracy\nrot,ours,t\n";
    assert!(MetricsReport::from_csv(bad).is_err());
}

#[test]
fn aggregates_recompute_group_means_and_sample_std() {
    let r = sample_report();
    let aggs = r.aggregates();

    let get = |method: &str, domain: &str, stat: &str| -> f64 {
        aggs.iter()
            .find(|a| a.method == method && a.target_domain == domain && a.statistic == stat)
            .unwrap_or_else(|| panic!("missing aggregate {method}/{domain}/{stat}"))
            .accuracy
    };

    assert!((get("ours", "rot75", "mean") - 0.71875).abs() < 1e-12);
    assert!((get("ours", "rot90", "mean") - 0.625).abs() < 1e-12);
    // Sample std with n-1: rot75 deviations +-0.09375 -> std = 0.09375*sqrt(2).
    let want_std = 0.09375 * 2.0_f64.sqrt();
    assert!((get("ours", "rot75", "std") - want_std).abs() < 1e-12);
    // Single-seed group: std defined as 0.
    assert_eq!(get("erm", "rot75", "std"), 0.0);
    // Cross-domain summary: mean over the per-domain means.
    assert!((get("ours", "all", "mean") - (0.71875 + 0.625) / 2.0).abs() < 1e-12);
}

#[test]
fn group_mean_answers_per_cell_queries() {
    let r = sample_report();
    let m = r.group_mean("rotation-ood", "ours", "rot90").unwrap();
    assert!((m - 0.625).abs() < 1e-12);
    assert!(r.group_mean("rotation-ood", "nope", "rot90").is_none());
}

#[test]
fn json_report_carries_rows_and_aggregates() {
    let r = sample_report();
    let json = r.to_json();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), r.rows.len());
    assert!(!v["aggregates"].as_array().unwrap().is_empty());
    assert_eq!(v["rows"][0]["experiment"], "rotation-ood");
}

// ── 2-D projection ──────────────────────────────────────────────────────

fn population_variance(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn projected_variances_equal_the_top_two_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let features: Vec<Vec<f64>> =
        (0..30).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let classifiers: Vec<Vec<f64>> =
        (0..4).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

    let p = project_2d(&features, &classifiers).unwrap();
    assert!(p.eigenvalues[0] >= p.eigenvalues[1], "eigenvalues must be sorted descending");

    for axis in 0..2 {
        let coords: Vec<f64> = p
            .feature_coords
            .iter()
            .chain(&p.classifier_coords)
            .map(|c| c[axis])
            .collect();
        let var = population_variance(&coords);
        assert!(
            (var - p.eigenvalues[axis]).abs() < 1e-8,
            "axis {axis}: projected variance {var} vs eigenvalue {}",
            p.eigenvalues[axis]
        );
    }
}

#[test]
fn two_dimensional_diagonal_covariance_is_recovered_exactly() {
    // Points (+-2, 0) and (0, +-1): population covariance diag(2, 0.5).
    let features = vec![vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
    let p = project_2d(&features, &[]).unwrap();
    assert!((p.eigenvalues[0] - 2.0).abs() < 1e-12);
    assert!((p.eigenvalues[1] - 0.5).abs() < 1e-12);
    // Axis-aligned eigenvectors with the positive-component sign rule give
    // back the original coordinates.
    let want = [[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    for (got, want) in p.feature_coords.iter().zip(&want) {
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
    }
}

#[test]
fn rank_one_data_projects_onto_a_line() {
    // All points are multiples of one direction; the second axis carries
    // no variance.
    let dir = [3.0, -1.0, 2.0];
    let features: Vec<Vec<f64>> =
        (0..6).map(|i| dir.iter().map(|&d| d * i as f64).collect()).collect();
    let p = project_2d(&features, &[]).unwrap();
    assert!(p.eigenvalues[1].abs() < 1e-9);
    let second: Vec<f64> = p.feature_coords.iter().map(|c| c[1]).collect();
    assert!(population_variance(&second) < 1e-9);
}

#[test]
fn projection_rejects_degenerate_inputs() {
    let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(project_2d(&two, &[]).is_err(), "fewer than three vectors");

    let one_d = vec![vec![1.0], vec![2.0], vec![3.0]];
    assert!(project_2d(&one_d, &[]).is_err(), "dimension below two");

    let ragged = vec![vec![1.0, 2.0], vec![1.0, 2.0, 3.0], vec![0.0, 0.0]];
    assert!(project_2d(&ragged, &[]).is_err(), "inconsistent dimensions");

    let constant = vec![vec![1.0, 1.0]; 4];
    assert!(project_2d(&constant, &[]).is_err(), "zero total variance");
}

// ── Scatter export ──────────────────────────────────────────────────────

#[test]
fn scatter_svg_is_structurally_sound() {
    let features = vec![vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
    let classifiers = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
    let p = project_2d(&features, &classifiers).unwrap();
    let svg = scatter_svg(&p, &[0, 0, 1, 1]);

    assert!(svg.starts_with("<?xml version=\"1.0\""));
    assert!(svg.contains("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("xmlns=\"http://www.w3.org/2000/svg\""));
    assert_eq!(svg.matches("<circle").count(), features.len());
    assert_eq!(svg.matches("<path").count(), classifiers.len());
}

#[test]
fn export_scatter_writes_a_file_and_validates_label_count() {
    let features = vec![vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 1.0]];
    let p = project_2d(&features, &[]).unwrap();

    assert!(export_scatter(&p, &[0, 1], std::path::Path::new("/tmp/never.svg")).is_err());

    let dir = std::env::temp_dir().join("domgen-eval-test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("scatter.svg");
    export_scatter(&p, &[0, 1, 2], &path).unwrap();
    let written = std::fs::read_to_string(&path).unwrap();
    assert!(written.contains("</svg>"));
    std::fs::remove_dir_all(&dir).ok();
}
