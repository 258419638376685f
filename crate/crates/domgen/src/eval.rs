//! Test-time inference and reporting: the frozen per-sample adaptation
//! path, accuracy bookkeeping, 2-D projection of features and classifier
//! prototypes, and CSV/JSON/SVG artifact export.
//!
//! The central contract is per-sample independence: `predict_single` reads
//! only the frozen context and the one image, so predictions cannot depend
//! on batch composition, stream mode, or evaluation order.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numcore::{GaussianParams, Scalar, Tape, Tensor};

use crate::data::{fnv1a64_bytes, mix_seed, LabeledImage, MultiDomainCorpus};
use crate::error::{Result, RunError};
use crate::model::{
    classify, compute_centers, infer_posterior_classifier, infer_prior_classifier,
    infer_source_classifier, GenerativeModel, StepBinds,
};
use crate::trainer::{MethodSpec, TrainConfig};

// ── Inference context ───────────────────────────────────────────────────

/// How test-time classifier weights are realized from the generated
/// Gaussians.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Use distribution means everywhere: fully deterministic, makes the
    /// per-sample-independence invariant exact.
    Deterministic,
    /// Draw classifier weights instead; every draw is seeded from `seed`
    /// and, for per-sample posteriors, the image bytes, so predictions
    /// still depend only on (context, image).
    Sampled { seed: u64 },
}

/// Frozen state for test-time prediction. The source-classifier statistics
/// are computed exactly once, at construction, from class centers over all
/// source domains; every prediction afterwards reuses the cache.
pub struct InferenceContext<F: Scalar> {
    spec: MethodSpec,
    mode: EvalMode,
    n_classes: usize,
    input_dim: usize,
    binds: StepBinds<F>,
    /// All-source class centers (C, d) from the fixed-seed support draw.
    pub centers: Tensor<F>,
    /// Cached p(w_s | S) = ψ(centers); `None` when the hierarchy is
    /// bypassed.
    pub source_gaussian: Option<GaussianParams<F>>,
    /// (C, d) rows fed to θ_a alongside each sample feature: the cached
    /// Gaussian's mean (or one seeded draw), or the raw centers.
    conditioner: Tensor<F>,
    /// Sample-independent classifier, cached for the variant without
    /// per-sample conditioning.
    fixed_classifier: Option<Tensor<F>>,
}

impl<F: Scalar> InferenceContext<F> {
    /// Builds the context: draws `support_per_class` training samples per
    /// class per source domain with `eval_seed`, computes class centers,
    /// and caches the source-classifier Gaussian.
    pub fn new(
        model: &GenerativeModel<F>,
        corpus: &MultiDomainCorpus,
        spec: MethodSpec,
        mode: EvalMode,
        support_per_class: usize,
        eval_seed: u64,
    ) -> Result<Self> {
        if corpus.sources.is_empty() {
            return Err(RunError::data("inference context needs ≥ 1 source domain"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        let mut rows: Vec<&LabeledImage> = Vec::new();
        let mut labels = Vec::new();
        let mut domains = Vec::new();
        for (dom_idx, dom) in corpus.sources.iter().enumerate() {
            for (class, pool) in dom.train_by_class().iter().enumerate() {
                if pool.len() < support_per_class {
                    return Err(RunError::data(format!(
                        "domain {} class {} has {} train sample(s), need {} for the \
                         evaluation support set",
                        dom.id,
                        class,
                        pool.len(),
                        support_per_class
                    )));
                }
                let picks =
                    rand::seq::index::sample(&mut rng, pool.len(), support_per_class);
                for p in picks.iter() {
                    rows.push(&dom.train[pool[p]]);
                    labels.push(class);
                    domains.push(dom_idx);
                }
            }
        }

        let mut tape = Tape::eval_only();
        let binds = model.bind(&mut tape)?;
        let images = stack_pixels::<F>(&rows)?;
        let feats = binds.backbone.features(&mut tape, &images)?;
        let all: Vec<usize> = (0..corpus.sources.len()).collect();
        let centers = compute_centers(
            &mut tape,
            &feats,
            &labels,
            &domains,
            &all,
            corpus.n_classes,
        )?;

        let (source_gaussian, conditioner) = if spec.hierarchical {
            let g = infer_source_classifier(&mut tape, &binds.psi, &centers)?;
            let cond = match mode {
                EvalMode::Deterministic => g.mean.clone(),
                EvalMode::Sampled { seed } => {
                    let mut draw_rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(seed, "source-classifier-draw"));
                    tape.reparameterize(&g, &mut draw_rng)?
                }
            };
            (Some(g), cond)
        } else {
            (None, centers.clone())
        };

        let fixed_classifier = if spec.sample_conditioning {
            None
        } else {
            let post = infer_prior_classifier(&mut tape, &binds.theta_a, &centers)?;
            Some(match mode {
                EvalMode::Deterministic => post.mean.clone(),
                EvalMode::Sampled { seed } => {
                    let mut draw_rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(seed, "fixed-classifier-draw"));
                    tape.reparameterize(&post, &mut draw_rng)?
                }
            })
        };

        Ok(InferenceContext {
            spec,
            mode,
            n_classes: corpus.n_classes,
            input_dim: model.backbone.input_dim(),
            binds,
            centers,
            source_gaussian,
            conditioner,
            fixed_classifier,
        })
    }

    /// Deterministic context matching the training run's configuration:
    /// the evaluation support seed is derived from the run seed so two
    /// identical runs validate on identical centers.
    pub fn for_validation(
        model: &GenerativeModel<F>,
        corpus: &MultiDomainCorpus,
        spec: &MethodSpec,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        Self::new(
            model,
            corpus,
            *spec,
            EvalMode::Deterministic,
            cfg.support_per_class,
            mix_seed(cfg.seed, "eval-support"),
        )
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Predicts one sample: feature = φ(image), per-class posterior from
    /// θ_a(concat(conditioner[c], feature)), classifier = posterior mean
    /// (or a seeded draw), logits = ⟨w_c, feature⟩. Reads only `self` and
    /// `pixels`.
    pub fn predict_single(&self, pixels: &[f32]) -> Result<(usize, Vec<f64>)> {
        if pixels.len() != self.input_dim {
            return Err(RunError::data(format!(
                "image has {} pixel(s), model expects {}",
                pixels.len(),
                self.input_dim
            )));
        }
        let mut tape = Tape::eval_only();
        let feat = self.embed(&mut tape, pixels)?;
        let w = self.classifier_tensor(&mut tape, &feat, pixels)?;
        let logits = classify(&mut tape, &w, &feat)?;
        let row: Vec<f64> = logits.data().iter().map(|&v| v.to_f64()).collect();
        let label = argmax(&row);
        Ok((label, row))
    }

    fn embed(&self, tape: &mut Tape<F>, pixels: &[f32]) -> Result<Tensor<F>> {
        let flat: Vec<F> = pixels.iter().map(|&p| F::from_f64(f64::from(p))).collect();
        let image = Tensor::from_vec(flat, &[1, self.input_dim]).map_err(RunError::from)?;
        self.binds.backbone.features(tape, &image)
    }

    /// The classifier this context uses for one sample: the cached fixed
    /// classifier, or the per-sample posterior mean / seeded draw.
    fn classifier_tensor(
        &self,
        tape: &mut Tape<F>,
        feat: &Tensor<F>,
        pixels: &[f32],
    ) -> Result<Tensor<F>> {
        if let Some(fixed) = &self.fixed_classifier {
            return Ok(fixed.clone());
        }
        let posterior =
            infer_posterior_classifier(tape, &self.binds.theta_a, &self.conditioner, feat)?;
        match self.mode {
            EvalMode::Deterministic => Ok(posterior.mean.clone()),
            EvalMode::Sampled { seed } => {
                let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
                let mut draw_rng =
                    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64_bytes(&bytes).rotate_left(23));
                Ok(tape.reparameterize(&posterior, &mut draw_rng)?)
            }
        }
    }

    /// Frozen-backbone feature embedding of one image, for visualization.
    pub fn features_of(&self, pixels: &[f32]) -> Result<Vec<f64>> {
        if pixels.len() != self.input_dim {
            return Err(RunError::data(format!(
                "image has {} pixel(s), model expects {}",
                pixels.len(),
                self.input_dim
            )));
        }
        let mut tape = Tape::eval_only();
        let feat = self.embed(&mut tape, pixels)?;
        Ok(feat.data().iter().map(|&v| v.to_f64()).collect())
    }

    /// The sample-independent classifier rows the context conditions on
    /// (source-classifier statistics, raw centers, or the cached fixed
    /// classifier) — the "before adaptation" reference.
    pub fn conditioning_rows(&self) -> Vec<Vec<f64>> {
        let rows = self.fixed_classifier.as_ref().unwrap_or(&self.conditioner);
        let d = rows.shape()[1];
        rows.data()
            .chunks_exact(d)
            .map(|r| r.iter().map(|&v| v.to_f64()).collect())
            .collect()
    }

    /// The classifier rows actually applied to this sample — for the
    /// variants with per-sample conditioning, the adapted classifier.
    pub fn adapted_classifier_rows(&self, pixels: &[f32]) -> Result<Vec<Vec<f64>>> {
        if pixels.len() != self.input_dim {
            return Err(RunError::data(format!(
                "image has {} pixel(s), model expects {}",
                pixels.len(),
                self.input_dim
            )));
        }
        let mut tape = Tape::eval_only();
        let feat = self.embed(&mut tape, pixels)?;
        let w = self.classifier_tensor(&mut tape, &feat, pixels)?;
        let d = w.shape()[1];
        Ok(w.data()
            .chunks_exact(d)
            .map(|r| r.iter().map(|&v| v.to_f64()).collect())
            .collect())
    }

    /// Fraction of samples whose argmax prediction matches the label.
    /// Evaluation is one sample at a time by definition; there is no
    /// batched code path that could couple predictions.
    pub fn accuracy<'a>(
        &self,
        samples: impl IntoIterator<Item = &'a LabeledImage>,
    ) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for s in samples {
            let (label, _) = self.predict_single(&s.pixels)?;
            correct += usize::from(label == s.label);
            total += 1;
        }
        if total == 0 {
            return Err(RunError::data("accuracy over an empty sample set"));
        }
        Ok(correct as f64 / total as f64)
    }

    /// The method spec this context serves.
    pub fn spec(&self) -> MethodSpec {
        self.spec
    }
}

fn stack_pixels<F: Scalar>(rows: &[&LabeledImage]) -> Result<Tensor<F>> {
    let pixels = rows.first().map_or(0, |s| s.pixels.len());
    let mut flat = Vec::with_capacity(rows.len() * pixels);
    for s in rows {
        flat.extend(s.pixels.iter().map(|&p| F::from_f64(f64::from(p))));
    }
    Tensor::from_vec(flat, &[rows.len(), pixels]).map_err(RunError::from)
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

// ── Metrics report ──────────────────────────────────────────────────────

/// One raw result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub method: String,
    pub target_domain: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Aggregate over seeds for one (experiment, method, target_domain), plus
/// cross-domain rows with `target_domain == "all"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: String,
    pub method: String,
    pub target_domain: String,
    /// `"mean"` or `"std"` — occupies the seed column in CSV output.
    pub statistic: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn new() -> Self {
        MetricsReport { rows: Vec::new() }
    }

    pub fn push(
        &mut self,
        experiment: &str,
        method: &str,
        target_domain: &str,
        seed: u64,
        accuracy: f64,
    ) {
        assert!(
            (0.0..=1.0).contains(&accuracy),
            "accuracy {} outside [0, 1]",
            accuracy
        );
        self.rows.push(MetricsRow {
            experiment: experiment.to_string(),
            method: method.to_string(),
            target_domain: target_domain.to_string(),
            seed,
            accuracy,
        });
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    /// Mean and sample standard deviation per (experiment, method,
    /// target_domain) over seeds, in first-appearance order, followed by a
    /// cross-domain mean per (experiment, method) with domain `"all"`.
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
        for r in &self.rows {
            let key = (r.experiment.clone(), r.method.clone(), r.target_domain.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, vals)) => vals.push(r.accuracy),
                None => groups.push((key, vec![r.accuracy])),
            }
        }
        let mut out = Vec::new();
        for ((exp, method, dom), vals) in &groups {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = sample_std(vals, mean);
            out.push(AggregateRow {
                experiment: exp.clone(),
                method: method.clone(),
                target_domain: dom.clone(),
                statistic: "mean".into(),
                accuracy: mean,
            });
            out.push(AggregateRow {
                experiment: exp.clone(),
                method: method.clone(),
                target_domain: dom.clone(),
                statistic: "std".into(),
                accuracy: std,
            });
        }
        // Cross-domain mean of the per-domain means, per (experiment, method).
        let mut pairs: Vec<(String, String)> = Vec::new();
        for ((exp, method, _), _) in &groups {
            if !pairs.iter().any(|(e, m)| e == exp && m == method) {
                pairs.push((exp.clone(), method.clone()));
            }
        }
        for (exp, method) in pairs {
            let domain_means: Vec<f64> = groups
                .iter()
                .filter(|((e, m, _), _)| *e == exp && *m == method)
                .map(|(_, vals)| vals.iter().sum::<f64>() / vals.len() as f64)
                .collect();
            let mean = domain_means.iter().sum::<f64>() / domain_means.len() as f64;
            out.push(AggregateRow {
                experiment: exp,
                method,
                target_domain: "all".into(),
                statistic: "mean".into(),
                accuracy: mean,
            });
        }
        out
    }

    /// Mean accuracy over seeds for one group, if present.
    pub fn group_mean(&self, experiment: &str, method: &str, target_domain: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.experiment == experiment
                    && r.method == method
                    && r.target_domain == target_domain
            })
            .map(|r| r.accuracy)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// CSV with the stable header, raw rows first, aggregate rows after
    /// (seed column carries `mean`/`std`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,method,target_domain,seed,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.experiment, r.method, r.target_domain, r.seed, r.accuracy
            );
        }
        for a in self.aggregates() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                a.experiment, a.method, a.target_domain, a.statistic, a.accuracy
            );
        }
        out
    }

    /// Parses the raw rows back out of `to_csv` output. Aggregate rows
    /// (non-numeric seed column) are skipped: they are derived data,
    /// recomputable from the raw rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| RunError::data("metrics CSV is empty"))?;
        if header != "experiment,method,target_domain,seed,accuracy" {
            return Err(RunError::data(format!("unexpected metrics header: {}", header)));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(RunError::data(format!(
                    "metrics CSV line {}: expected 5 fields, got {}",
                    n + 2,
                    parts.len()
                )));
            }
            let seed = match parts[3].parse::<u64>() {
                Ok(s) => s,
                Err(_) => continue, // aggregate row
            };
            let accuracy = parts[4].parse::<f64>().map_err(|_| {
                RunError::data(format!("metrics CSV line {}: bad accuracy", n + 2))
            })?;
            rows.push(MetricsRow {
                experiment: parts[0].to_string(),
                method: parts[1].to_string(),
                target_domain: parts[2].to_string(),
                seed,
                accuracy,
            });
        }
        Ok(MetricsReport { rows })
    }

    /// JSON mirror of the CSV content: raw rows plus aggregates.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            rows: &'a [MetricsRow],
            aggregates: Vec<AggregateRow>,
        }
        serde_json::to_string_pretty(&Doc { rows: &self.rows, aggregates: self.aggregates() })
            .expect("report serialization cannot fail")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn sample_std(vals: &[f64], mean: f64) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (vals.len() - 1) as f64).sqrt()
}

// ── 2-D projection ──────────────────────────────────────────────────────

/// PCA projection of features and classifier prototypes into one shared
/// plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub feature_coords: Vec<[f64; 2]>,
    pub classifier_coords: Vec<[f64; 2]>,
    /// Top-2 eigenvalues of the population covariance of the union; equal
    /// to the variances of the projected coordinates.
    pub eigenvalues: [f64; 2],
}

/// Fits PCA on the union of `features` and `classifier_rows` (mean
/// centered, population covariance) and projects both sets onto the top-2
/// eigenvectors. Sign convention: each eigenvector's largest-magnitude
/// component is made positive, so projections are deterministic.
pub fn project_2d(features: &[Vec<f64>], classifier_rows: &[Vec<f64>]) -> Result<Projection> {
    let n = features.len() + classifier_rows.len();
    if n < 3 {
        return Err(RunError::data(format!(
            "projection needs ≥ 3 vectors, got {}",
            n
        )));
    }
    let d = features
        .first()
        .or_else(|| classifier_rows.first())
        .map(|v| v.len())
        .unwrap_or(0);
    if d < 2 {
        return Err(RunError::data(format!(
            "projection needs dimension ≥ 2, got {}",
            d
        )));
    }
    let union: Vec<&Vec<f64>> = features.iter().chain(classifier_rows.iter()).collect();
    if let Some(bad) = union.iter().find(|v| v.len() != d) {
        return Err(RunError::data(format!(
            "inconsistent vector dimensions: {} vs {}",
            bad.len(),
            d
        )));
    }

    let mut mean = vec![0.0f64; d];
    for v in &union {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Population covariance of the centered union.
    let mut cov = vec![vec![0.0f64; d]; d];
    for v in &union {
        for i in 0..d {
            let ci = v[i] - mean[i];
            for j in i..d {
                cov[i][j] += ci * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }

    let (mut eigvals, mut eigvecs) = jacobi_eigen(cov);
    // Sort descending by eigenvalue; stable on ties.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).expect("finite eigenvalues"));
    eigvals = order.iter().map(|&i| eigvals[i]).collect();
    eigvecs = order.iter().map(|&i| eigvecs[i].clone()).collect();

    if eigvals[0] <= 1e-300 {
        return Err(RunError::data(
            "degenerate projection input: all vectors identical (zero variance)",
        ));
    }

    let mut axes = [eigvecs[0].clone(), eigvecs[1].clone()];
    for axis in &mut axes {
        let mut arg = 0;
        for (i, &v) in axis.iter().enumerate() {
            if v.abs() > axis[arg].abs() {
                arg = i;
            }
        }
        if axis[arg] < 0.0 {
            for v in axis.iter_mut() {
                *v = -*v;
            }
        }
    }

    let project = |v: &Vec<f64>| -> [f64; 2] {
        let mut out = [0.0f64; 2];
        for (k, axis) in axes.iter().enumerate() {
            out[k] = v
                .iter()
                .zip(axis)
                .zip(&mean)
                .map(|((x, a), m)| (x - m) * a)
                .sum();
        }
        out
    };

    Ok(Projection {
        feature_coords: features.iter().map(project).collect(),
        classifier_coords: classifier_rows.iter().map(project).collect(),
        eigenvalues: [eigvals[0].max(0.0), eigvals[1].max(0.0)],
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors), eigenvector `i` paired with eigenvalue `i`.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v = vec![vec![0.0f64; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let frob: f64 = a
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let tol = (frob * 1e-14).max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() <= tol * 1e-3 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for vk in v.iter_mut() {
                    let vp = vk[p];
                    let vq = vk[q];
                    vk[p] = c * vp - s * vq;
                    vk[q] = s * vp + c * vq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..d).map(|i| a[i][i]).collect();
    let eigvecs: Vec<Vec<f64>> = (0..d).map(|i| v.iter().map(|row| row[i]).collect()).collect();
    (eigvals, eigvecs)
}

// ── SVG scatter export ──────────────────────────────────────────────────

const SVG_SIZE: f64 = 640.0;
const SVG_MARGIN: f64 = 48.0;
const CLASS_COLORS: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf",
];

/// Writes the projection as a standalone SVG scatter: samples as small
/// class-colored circles, classifier prototypes as larger black-stroked
/// diamonds in the class color. `feature_labels[i]` colors
/// `feature_coords[i]`; classifier row `c` is colored as class `c`.
pub fn export_scatter(
    projection: &Projection,
    feature_labels: &[usize],
    path: &Path,
) -> Result<()> {
    let svg = checked_svg(projection, feature_labels)?;
    std::fs::write(path, svg)?;
    Ok(())
}

/// Like [`export_scatter`] but stamps the config hash into the file as an
/// XML comment right after the declaration, so the figure's provenance is
/// checkable like every other artifact.
pub fn export_scatter_svg(
    projection: &Projection,
    feature_labels: &[usize],
    path: &Path,
    config_hash: &str,
) -> Result<()> {
    let svg = checked_svg(projection, feature_labels)?;
    let stamped = match svg.split_once('\n') {
        Some((decl, rest)) => format!("{decl}\n<!-- config_hash={config_hash} -->\n{rest}"),
        None => svg,
    };
    std::fs::write(path, stamped)?;
    Ok(())
}

fn checked_svg(projection: &Projection, feature_labels: &[usize]) -> Result<String> {
    if feature_labels.len() != projection.feature_coords.len() {
        return Err(RunError::data(format!(
            "{} label(s) for {} projected feature(s)",
            feature_labels.len(),
            projection.feature_coords.len()
        )));
    }
    Ok(scatter_svg(projection, feature_labels))
}

pub fn scatter_svg(projection: &Projection, feature_labels: &[usize]) -> String {
    let all: Vec<[f64; 2]> = projection
        .feature_coords
        .iter()
        .chain(projection.classifier_coords.iter())
        .copied()
        .collect();
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &all {
        lo_x = lo_x.min(p[0]);
        hi_x = hi_x.max(p[0]);
        lo_y = lo_y.min(p[1]);
        hi_y = hi_y.max(p[1]);
    }
    if !lo_x.is_finite() {
        lo_x = 0.0;
        hi_x = 1.0;
        lo_y = 0.0;
        hi_y = 1.0;
    }
    let span_x = (hi_x - lo_x).max(1e-12);
    let span_y = (hi_y - lo_y).max(1e-12);
    let inner = SVG_SIZE - 2.0 * SVG_MARGIN;
    let to_px = |p: [f64; 2]| -> (f64, f64) {
        let x = SVG_MARGIN + (p[0] - lo_x) / span_x * inner;
        // SVG y grows downward; flip so larger coordinates plot higher.
        let y = SVG_SIZE - SVG_MARGIN - (p[1] - lo_y) / span_y * inner;
        (x, y)
    };

    let mut body = String::new();
    let _ = writeln!(
        body,
        "<rect x=\"0\" y=\"0\" width=\"{s}\" height=\"{s}\" fill=\"white\" stroke=\"#333333\"/>",
        s = SVG_SIZE
    );
    for (p, &label) in projection.feature_coords.iter().zip(feature_labels) {
        let (x, y) = to_px(*p);
        let color = CLASS_COLORS[label % CLASS_COLORS.len()];
        let _ = writeln!(
            body,
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.65\"/>",
            x, y, color
        );
    }
    for (c, p) in projection.classifier_coords.iter().enumerate() {
        let (x, y) = to_px(*p);
        let color = CLASS_COLORS[c % CLASS_COLORS.len()];
        let r = 8.0;
        let _ = writeln!(
            body,
            "<path d=\"M {:.3} {:.3} L {:.3} {:.3} L {:.3} {:.3} L {:.3} {:.3} Z\" \
             fill=\"{}\" stroke=\"black\" stroke-width=\"1.5\"/>",
            x,
            y - r,
            x + r,
            y,
            x,
            y + r,
            x - r,
            y,
            color
        );
    }
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" \
         viewBox=\"0 0 {s} {s}\">\n{body}</svg>\n",
        s = SVG_SIZE,
        body = body
    )
}
