//! Unit tests for the generator model pieces: backbone features, class
//! centers, the generated-classifier application, and the two conditioning
//! paths of the shared classifier-generator network.

use domgen::model::{
    classify, compute_centers, infer_prior_classifier, infer_posterior_classifier,
    infer_source_classifier, tile_row, Backbone, GaussianHead, GenerativeModel, LOGVAR_BIAS_INIT,
};
use numcore::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, &[rows, cols]).unwrap()
}

// ── Backbone ────────────────────────────────────────────────────────────

#[test]
fn backbone_features_have_declared_shape_and_are_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Backbone::<f64>::new(&mut rng, &[10, 8, 5]).unwrap();
    assert_eq!(net.input_dim(), 10);
    assert_eq!(net.feature_dim(), 5);

    let mut tape = Tape::eval_only();
    let bind = net.bind(&mut tape).unwrap();
    let x = random_matrix(&mut rng, 6, 10);
    let feats = bind.features(&mut tape, &x).unwrap();
    assert_eq!(feats.shape(), &[6, 5]);
    assert!(feats.data().iter().all(|&v| v >= 0.0), "relu output must be nonnegative");
}

#[test]
fn backbone_rejects_degenerate_width_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    assert!(Backbone::<f64>::new(&mut rng, &[10]).is_err());
    assert!(Backbone::<f64>::new(&mut rng, &[]).is_err());
    assert!(Backbone::<f64>::new(&mut rng, &[10, 0, 4]).is_err());
}

// ── Class centers ───────────────────────────────────────────────────────

/// Hand-loop oracle: per-domain class means, averaged uniformly over the
/// domains (in `domain_set`) that contain at least one sample of the class.
fn center_oracle(
    features: &[Vec<f64>],
    labels: &[usize],
    domain_ids: &[usize],
    domain_set: &[usize],
    n_classes: usize,
) -> Vec<Vec<f64>> {
    let d = features[0].len();
    let mut out = vec![vec![0.0; d]; n_classes];
    for c in 0..n_classes {
        let mut domain_means: Vec<Vec<f64>> = Vec::new();
        for &dom in domain_set {
            let rows: Vec<&Vec<f64>> = features
                .iter()
                .zip(labels.iter().zip(domain_ids))
                .filter(|(_, (&l, &dm))| l == c && dm == dom)
                .map(|(f, _)| f)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for r in &rows {
                for (m, v) in mean.iter_mut().zip(r.iter()) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= rows.len() as f64;
            }
            domain_means.push(mean);
        }
        for mean in &domain_means {
            for (o, v) in out[c].iter_mut().zip(mean) {
                *o += v / domain_means.len() as f64;
            }
        }
    }
    out
}

fn centers_fixture(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    n_classes: usize,
    n_domains: usize,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    // Guarantee every (domain, class) cell is populated at least once, then
    // fill the rest at random.
    let mut labels = Vec::with_capacity(n);
    let mut domain_ids = Vec::with_capacity(n);
    for dom in 0..n_domains {
        for c in 0..n_classes {
            labels.push(c);
            domain_ids.push(dom);
        }
    }
    while labels.len() < n {
        labels.push(rng.gen_range(0..n_classes));
        domain_ids.push(rng.gen_range(0..n_domains));
    }
    (features, labels, domain_ids)
}

fn centers_of(
    features: &[Vec<f64>],
    labels: &[usize],
    domain_ids: &[usize],
    domain_set: &[usize],
    n_classes: usize,
) -> Tensor<f64> {
    let d = features[0].len();
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    let x = Tensor::from_vec(flat, &[features.len(), d]).unwrap();
    let mut tape = Tape::eval_only();
    let feats = tape.leaf_tensor(&x).unwrap();
    compute_centers(&mut tape, &feats, labels, domain_ids, domain_set, n_classes).unwrap()
}

#[test]
fn centers_match_a_per_domain_per_class_mean_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (features, labels, domain_ids) = centers_fixture(&mut rng, 40, 6, 3, 2);
    let got = centers_of(&features, &labels, &domain_ids, &[0, 1], 3);
    let want = center_oracle(&features, &labels, &domain_ids, &[0, 1], 3);
    assert_eq!(got.shape(), &[3, 6]);
    for c in 0..3 {
        for j in 0..6 {
            let g = got.data()[c * 6 + j];
            let w = want[c][j];
            assert!((g - w).abs() < 1e-12, "center[{c}][{j}]: {g} vs oracle {w}");
        }
    }
}

#[test]
fn centers_are_invariant_to_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (features, labels, domain_ids) = centers_fixture(&mut rng, 30, 5, 2, 2);
    let base = centers_of(&features, &labels, &domain_ids, &[0, 1], 2);

    // Reverse the sample order wholesale.
    let rev_f: Vec<Vec<f64>> = features.iter().rev().cloned().collect();
    let rev_l: Vec<usize> = labels.iter().rev().copied().collect();
    let rev_d: Vec<usize> = domain_ids.iter().rev().copied().collect();
    let permuted = centers_of(&rev_f, &rev_l, &rev_d, &[0, 1], 2);

    for (a, b) in base.data().iter().zip(permuted.data()) {
        assert!((a - b).abs() < 1e-12, "center moved under permutation: {a} vs {b}");
    }
}

#[test]
fn centers_ignore_domains_outside_the_requested_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut features, mut labels, mut domain_ids) = centers_fixture(&mut rng, 20, 4, 2, 2);
    let base = centers_of(&features, &labels, &domain_ids, &[0, 1], 2);

    // Pile on samples from a domain that is not in the requested set.
    for _ in 0..15 {
        features.push((0..4).map(|_| rng.gen_range(-9.0..9.0)).collect());
        labels.push(rng.gen_range(0..2));
        domain_ids.push(7);
    }
    let with_extras = centers_of(&features, &labels, &domain_ids, &[0, 1], 2);
    assert_eq!(base.data(), with_extras.data());
}

#[test]
fn duplicating_every_sample_of_a_domain_leaves_centers_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (features, labels, domain_ids) = centers_fixture(&mut rng, 18, 4, 2, 2);
    let base = centers_of(&features, &labels, &domain_ids, &[0, 1], 2);

    let mut f2 = features.clone();
    let mut l2 = labels.clone();
    let mut d2 = domain_ids.clone();
    for i in 0..features.len() {
        if domain_ids[i] == 0 {
            f2.push(features[i].clone());
            l2.push(labels[i]);
            d2.push(0);
        }
    }
    let doubled = centers_of(&f2, &l2, &d2, &[0, 1], 2);
    for (a, b) in base.data().iter().zip(doubled.data()) {
        assert!((a - b).abs() < 1e-12, "duplication changed a center: {a} vs {b}");
    }
}

#[test]
fn centers_error_when_a_class_is_missing_from_every_requested_domain() {
    let features = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let labels = vec![0, 0]; // class 1 never appears
    let domain_ids = vec![0, 1];
    let d = features[0].len();
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    let x = Tensor::from_vec(flat, &[2, d]).unwrap();
    let mut tape = Tape::eval_only();
    let feats = tape.leaf_tensor(&x).unwrap();
    let err = compute_centers(&mut tape, &feats, &labels, &domain_ids, &[0, 1], 2)
        .err()
        .expect("missing class must be rejected");
    assert!(err.to_string().contains("no support samples"), "got: {err}");
}

// ── Generated-classifier application ────────────────────────────────────

#[test]
fn classify_matches_an_explicit_dot_product_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let w = random_matrix(&mut rng, 3, 5); // (C, d)
    let x = random_matrix(&mut rng, 4, 5); // (B, d)

    let mut tape = Tape::eval_only();
    let wt = tape.leaf_tensor(&w).unwrap();
    let xt = tape.leaf_tensor(&x).unwrap();
    let logits = classify(&mut tape, &wt, &xt).unwrap();
    assert_eq!(logits.shape(), &[4, 3]);

    for b in 0..4 {
        for c in 0..3 {
            let want: f64 = (0..5).map(|j| w.data()[c * 5 + j] * x.data()[b * 5 + j]).sum();
            let got = logits.data()[b * 3 + c];
            assert!((got - want).abs() < 1e-12, "logit[{b}][{c}]: {got} vs {want}");
        }
    }
}

#[test]
fn tile_row_repeats_one_row_exactly() {
    let row = Tensor::from_vec(vec![1.5, -2.0, 0.25], &[1, 3]).unwrap();
    let mut tape = Tape::eval_only();
    let r = tape.leaf_tensor(&row).unwrap();
    let tiled = tile_row(&mut tape, &r, 4).unwrap();
    assert_eq!(tiled.shape(), &[4, 3]);
    for b in 0..4 {
        assert_eq!(&tiled.data()[b * 3..(b + 1) * 3], row.data());
    }
}

// ── Conditioning network paths ──────────────────────────────────────────

#[test]
fn source_classifier_rows_depend_only_on_their_own_center() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let model = GenerativeModel::<f64>::new(&mut rng, &[6, 5, 4]).unwrap();
    let d = model.feature_dim();

    let centers_a = random_matrix(&mut rng, 3, d);
    let mut data_b = centers_a.data().to_vec();
    for v in &mut data_b[d..2 * d] {
        *v += 0.37; // perturb row 1 only
    }
    let centers_b = Tensor::from_vec(data_b, &[3, d]).unwrap();

    let run = |centers: &Tensor<f64>| {
        let mut tape = Tape::eval_only();
        let binds = model.bind(&mut tape).unwrap();
        let c = tape.leaf_tensor(centers).unwrap();
        let g = infer_source_classifier(&mut tape, &binds.psi, &c).unwrap();
        (g.mean.data().to_vec(), g.logvar.data().to_vec())
    };
    let (mean_a, logvar_a) = run(&centers_a);
    let (mean_b, logvar_b) = run(&centers_b);

    assert_eq!(&mean_a[..d], &mean_b[..d], "row 0 mean must not move");
    assert_eq!(&mean_a[2 * d..], &mean_b[2 * d..], "row 2 mean must not move");
    assert_eq!(&logvar_a[..d], &logvar_b[..d], "row 0 logvar must not move");
    assert_eq!(&logvar_a[2 * d..], &logvar_b[2 * d..], "row 2 logvar must not move");
    assert_ne!(&mean_a[d..2 * d], &mean_b[d..2 * d], "row 1 must respond to its center");
}

#[test]
fn prior_and_posterior_paths_share_one_conditioning_network() {
    // With a single class, conditioning the posterior path on (w_s = center,
    // feature = center) builds exactly the prior path's doubled input. Equal
    // outputs prove both paths run through the same network parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = GenerativeModel::<f64>::new(&mut rng, &[6, 5, 4]).unwrap();
    let d = model.feature_dim();
    let center = random_matrix(&mut rng, 1, d);

    let mut tape = Tape::eval_only();
    let binds = model.bind(&mut tape).unwrap();
    let c = tape.leaf_tensor(&center).unwrap();
    let prior = infer_prior_classifier(&mut tape, &binds.theta_a, &c).unwrap();
    let posterior = infer_posterior_classifier(&mut tape, &binds.theta_a, &c, &c).unwrap();

    assert_eq!(prior.mean.data(), posterior.mean.data());
    assert_eq!(prior.logvar.data(), posterior.logvar.data());
}

#[test]
fn gaussian_head_starts_near_deterministic() {
    // Zero input rides purely on the biases: hidden relu(0) = 0, so the
    // output is the out-layer bias, whose log-variance half is initialized
    // to a large negative constant (tight initial distributions).
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let head = GaussianHead::<f64>::new(&mut rng, 4, 3);
    let mut tape = Tape::eval_only();
    let bind = head.bind(&mut tape).unwrap();
    let zeros = tape.leaf_tensor(&Tensor::zeros(&[2, 4])).unwrap();
    let g = bind.forward(&mut tape, &zeros).unwrap();
    assert!(g.mean.data().iter().all(|&v| v == 0.0));
    assert!(g.logvar.data().iter().all(|&v| v == LOGVAR_BIAS_INIT));
}

#[test]
fn model_head_parameter_lists_are_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut model = GenerativeModel::<f64>::new(&mut rng, &[6, 5, 4]).unwrap();
    let shapes: Vec<Vec<usize>> =
        model.head_params().iter().map(|p| p.value().shape().to_vec()).collect();
    let shapes_mut: Vec<Vec<usize>> =
        model.head_params_mut().iter().map(|p| p.value().shape().to_vec()).collect();
    assert_eq!(shapes, shapes_mut, "params and params_mut must enumerate identically");
    assert_eq!(shapes.len(), 8, "two heads, two dense layers each, weight+bias");
}
