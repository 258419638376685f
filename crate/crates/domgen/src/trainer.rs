//! Episodic meta-training. Each iteration simulates a source→target shift
//! by holding one source domain out as meta-target, generates per-class
//! classifier distributions conditioned on the remaining meta-sources and
//! on each query sample, and minimizes
//!
//!   ce_posterior + ce_prior + β · kl
//!
//! where ce_posterior scores reparameterized draws from the per-sample
//! posterior mixture, ce_prior scores draws from the meta-target prior
//! (keeping the prior predictive on its own), and kl pulls the posterior
//! components toward the prior. All Monte Carlo sums are normalized to
//! means so the loss scale is invariant to the draw counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use numcore::{adam_step, AdamState, GaussianParams, Scalar, Tape, Tensor};

use crate::data::{
    mix_seed, sample_episode, sample_pooled_batch, DomainSupport, LabeledImage,
    MultiDomainCorpus,
};
use crate::error::{Result, RunError};
use crate::eval::InferenceContext;
use crate::model::{
    classify, compute_centers, infer_prior_classifier, infer_source_classifier, tile_row,
    GenerativeModel,
};

// ── Configuration ───────────────────────────────────────────────────────

/// Training hyperparameters. Defaults are the desk-scale settings used by
/// the experiment protocols.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub support_per_class: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Draws from the posterior (mixture) for the first CE term.
    pub mc_m: usize,
    /// Draws from the prior for the supervision CE term.
    pub mc_n: usize,
    /// Source-classifier draws forming the posterior mixture components.
    pub mc_l: usize,
    /// β weight on the KL term.
    pub kl_weight: f64,
    pub seed: u64,
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 128,
            support_per_class: 10,
            lr_backbone: 5e-5,
            lr_heads: 1e-4,
            mc_m: 1,
            mc_n: 1,
            mc_l: 1,
            kl_weight: 1.0,
            seed: 0,
            val_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("train.iterations", self.iterations),
            ("train.batch", self.batch),
            ("train.support_per_class", self.support_per_class),
            ("train.mc_m", self.mc_m),
            ("train.mc_n", self.mc_n),
            ("train.mc_l", self.mc_l),
            ("train.val_every", self.val_every),
        ];
        for (path, v) in positive_counts {
            if v == 0 {
                return Err(RunError::config(path, "must be ≥ 1"));
            }
        }
        if !(self.lr_backbone > 0.0) || !(self.lr_heads > 0.0) {
            return Err(RunError::config("train.lr_backbone", "learning rates must be > 0"));
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return Err(RunError::config("train.kl_weight", "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Which pieces of the full objective a run uses. The full method has every
/// flag on; each published ablation toggles exactly one off (the invariant
/// baseline turns off several, see `baselines`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MethodSpec {
    /// Draw classifier samples from ψ(meta-source centers) and condition
    /// θ_a on them (the two-stage posterior). Off: condition θ_a on the
    /// raw meta-source centers.
    pub hierarchical: bool,
    /// Include the prior cross-entropy term that keeps the meta-prior
    /// predictive on its own.
    pub prior_supervision: bool,
    /// Condition the posterior on each query sample's feature. Off: one
    /// sample-independent classifier per episode (the invariant baseline).
    pub sample_conditioning: bool,
    /// Meta-split episodes. Off: centers from all sources, pooled query
    /// batch, no meta-target heldout.
    pub episodic: bool,
}

impl MethodSpec {
    pub fn full() -> Self {
        MethodSpec {
            hierarchical: true,
            prior_supervision: true,
            sample_conditioning: true,
            episodic: true,
        }
    }
}

/// Scalar loss components of one step, for history records.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce_posterior: f64,
    pub ce_prior: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub val_accuracy: Option<f64>,
}

/// Finished run: final parameters, the snapshot with the highest recorded
/// validation accuracy, and the per-iteration history.
pub struct TrainOutcome<F: Scalar> {
    pub model: GenerativeModel<F>,
    pub best: GenerativeModel<F>,
    pub best_val_accuracy: f64,
    pub history: Vec<HistoryRecord>,
}

// ── Step batch assembly ─────────────────────────────────────────────────

/// Flattened tensors and index bookkeeping for one optimization step,
/// uniform across the episodic and pooled variants.
pub struct StepBatch<F: Scalar> {
    pub support_images: Tensor<F>,
    pub support_labels: Vec<usize>,
    pub support_domains: Vec<usize>,
    pub query_images: Tensor<F>,
    pub query_labels: Vec<usize>,
    /// Domains whose centers condition the posterior path (S', or all).
    pub posterior_domains: Vec<usize>,
    /// Domains whose centers condition the prior path ({T'}, or all).
    pub prior_domains: Vec<usize>,
    pub n_classes: usize,
}

fn stack_images<F: Scalar>(images: &[&LabeledImage]) -> Result<Tensor<F>> {
    let pixels = images.first().map_or(0, |s| s.pixels.len());
    let mut flat = Vec::with_capacity(images.len() * pixels);
    for s in images {
        flat.extend(s.pixels.iter().map(|&p| F::from_f64(f64::from(p))));
    }
    Tensor::from_vec(flat, &[images.len(), pixels]).map_err(RunError::from)
}

fn support_rows<'c>(
    corpus: &'c MultiDomainCorpus,
    support: &[DomainSupport],
) -> (Vec<&'c LabeledImage>, Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for sup in support {
        for (class, idx) in sup.per_class.iter().enumerate() {
            for &i in idx {
                rows.push(&corpus.sources[sup.domain].train[i]);
                labels.push(class);
                domains.push(sup.domain);
            }
        }
    }
    (rows, labels, domains)
}

impl<F: Scalar> StepBatch<F> {
    /// Builds the step inputs, sampling an episode or a pooled batch
    /// depending on `spec.episodic`.
    pub fn sample(
        corpus: &MultiDomainCorpus,
        spec: &MethodSpec,
        cfg: &TrainConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let all: Vec<usize> = (0..corpus.sources.len()).collect();
        if spec.episodic {
            let ep = sample_episode(corpus, rng, cfg.support_per_class, cfg.batch)?;
            let (rows, support_labels, support_domains) = support_rows(corpus, &ep.support);
            let target = &corpus.sources[ep.meta_target];
            let query_rows: Vec<&LabeledImage> =
                ep.query.iter().map(|&i| &target.train[i]).collect();
            let query_labels = query_rows.iter().map(|s| s.label).collect();
            Ok(StepBatch {
                support_images: stack_images(&rows)?,
                support_labels,
                support_domains,
                query_images: stack_images(&query_rows)?,
                query_labels,
                posterior_domains: all
                    .iter()
                    .copied()
                    .filter(|&d| d != ep.meta_target)
                    .collect(),
                prior_domains: vec![ep.meta_target],
                n_classes: corpus.n_classes,
            })
        } else {
            let pb = sample_pooled_batch(corpus, rng, cfg.support_per_class, cfg.batch)?;
            let (rows, support_labels, support_domains) = support_rows(corpus, &pb.support);
            let query_rows: Vec<&LabeledImage> = pb
                .query
                .iter()
                .map(|&(d, i)| &corpus.sources[d].train[i])
                .collect();
            let query_labels = query_rows.iter().map(|s| s.label).collect();
            Ok(StepBatch {
                support_images: stack_images(&rows)?,
                support_labels,
                support_domains,
                query_images: stack_images(&query_rows)?,
                query_labels,
                posterior_domains: all.clone(),
                prior_domains: all,
                n_classes: corpus.n_classes,
            })
        }
    }
}

// ── Loss graph ──────────────────────────────────────────────────────────

pub struct LossTensors<F: Scalar> {
    pub ce_posterior: Tensor<F>,
    pub ce_prior: Tensor<F>,
    pub kl: Tensor<F>,
    pub total: Tensor<F>,
}

/// Row-wise dot products between two (B, d) tensors → (B, 1).
fn row_dot<F: Scalar>(
    tape: &mut Tape<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    let prod = tape.mul(a, b)?;
    let d = prod.shape()[1];
    let ones = Tensor::filled(F::one(), &[d, 1]);
    Ok(tape.matmul(&prod, &ones)?)
}

/// Builds the full objective graph for one step on `tape`. Exposed so the
/// composite finite-difference check can drive it with a reseeded rng.
pub fn build_step_loss<F: Scalar>(
    tape: &mut Tape<F>,
    model: &GenerativeModel<F>,
    batch: &StepBatch<F>,
    spec: &MethodSpec,
    cfg: &TrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<(LossTensors<F>, crate::model::StepBinds<F>)> {
    let n_classes = batch.n_classes;
    let binds = model.bind(tape)?;

    let feats_sup = binds.backbone.features(tape, &batch.support_images)?;
    let feats_q = binds.backbone.features(tape, &batch.query_images)?;

    let centers_post = compute_centers(
        tape,
        &feats_sup,
        &batch.support_labels,
        &batch.support_domains,
        &batch.posterior_domains,
        n_classes,
    )?;
    let centers_prior = compute_centers(
        tape,
        &feats_sup,
        &batch.support_labels,
        &batch.support_domains,
        &batch.prior_domains,
        n_classes,
    )?;

    let prior = infer_prior_classifier(tape, &binds.theta_a, &centers_prior)?;

    let (ce_posterior, kl) = if spec.sample_conditioning {
        per_sample_objective(tape, &binds, batch, spec, cfg, &feats_q, &centers_post, &prior, n_classes, rng)?
    } else {
        episode_level_objective(tape, &binds, cfg, &feats_q, &batch.query_labels, &centers_post, &prior, rng)?
    };

    let ce_prior = if spec.prior_supervision {
        let mut acc: Option<Tensor<F>> = None;
        for _ in 0..cfg.mc_n {
            let w = tape.reparameterize(&prior, rng)?;
            let logits = classify(tape, &w, &feats_q)?;
            let ce = tape.softmax_cross_entropy(&logits, &batch.query_labels)?;
            acc = Some(match acc {
                None => ce,
                Some(a) => tape.add(&a, &ce)?,
            });
        }
        tape.scale(&acc.expect("mc_n ≥ 1"), F::from_f64(1.0 / cfg.mc_n as f64))?
    } else {
        tape.leaf_tensor(&Tensor::scalar(F::zero()))?
    };

    let weighted_kl = tape.scale(&kl, F::from_f64(cfg.kl_weight))?;
    let partial = tape.add(&ce_posterior, &ce_prior)?;
    let total = tape.add(&partial, &weighted_kl)?;
    Ok((
        LossTensors { ce_posterior, ce_prior, kl, total },
        binds,
    ))
}

/// Posterior CE and KL for the per-sample variants (full, no-hierarchy,
/// non-meta): one Gaussian per (component, class, query sample).
#[allow(clippy::too_many_arguments)]
fn per_sample_objective<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &crate::model::StepBinds<F>,
    batch: &StepBatch<F>,
    spec: &MethodSpec,
    cfg: &TrainConfig,
    feats_q: &Tensor<F>,
    centers_post: &Tensor<F>,
    prior: &GaussianParams<F>,
    n_classes: usize,
    rng: &mut impl rand::Rng,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let b = batch.query_labels.len();
    let n_components = if spec.hierarchical { cfg.mc_l } else { 1 };

    // Conditioning matrices (C, d): ψ draws under the hierarchy, raw
    // meta-source centers without it.
    let mut components = Vec::with_capacity(n_components);
    if spec.hierarchical {
        let source_gauss = infer_source_classifier(tape, &binds.psi, centers_post)?;
        for _ in 0..cfg.mc_l {
            components.push(tape.reparameterize(&source_gauss, rng)?);
        }
    } else {
        components.push(centers_post.clone());
    }

    let mut ce_acc: Option<Tensor<F>> = None;
    let mut kl_acc: Option<Tensor<F>> = None;
    for cond in &components {
        // One θ_a pass per class over the whole query batch.
        let mut class_gaussians = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let w_row = tape.slice(cond, 0, c, 1)?;
            let tiled = tile_row(tape, &w_row, b)?;
            let joined = tape.concat(&[&tiled, feats_q], 1)?;
            class_gaussians.push(binds.theta_a.forward(tape, &joined)?);
        }

        for _ in 0..cfg.mc_m {
            let mut logit_cols = Vec::with_capacity(n_classes);
            for g in &class_gaussians {
                let w_draw = tape.reparameterize(g, rng)?;
                logit_cols.push(row_dot(tape, &w_draw, feats_q)?);
            }
            let col_refs: Vec<&Tensor<F>> = logit_cols.iter().collect();
            let logits = tape.concat(&col_refs, 1)?;
            let ce = tape.softmax_cross_entropy(&logits, &batch.query_labels)?;
            ce_acc = Some(match ce_acc {
                None => ce,
                Some(a) => tape.add(&a, &ce)?,
            });
        }

        for (c, g) in class_gaussians.iter().enumerate() {
            let pm_row = tape.slice(&prior.mean, 0, c, 1)?;
            let plv_row = tape.slice(&prior.logvar, 0, c, 1)?;
            let pm = tile_row(tape, &pm_row, b)?;
            let plv = tile_row(tape, &plv_row, b)?;
            let p_tiled = GaussianParams::new(pm, plv).map_err(RunError::from)?;
            let kl_c = tape.gaussian_kl(g, &p_tiled)?;
            kl_acc = Some(match kl_acc {
                None => kl_c,
                Some(a) => tape.add(&a, &kl_c)?,
            });
        }
    }

    let ce_norm = 1.0 / (n_components * cfg.mc_m) as f64;
    let kl_norm = 1.0 / (n_components * b) as f64;
    let ce = tape.scale(&ce_acc.expect("≥1 component and draw"), F::from_f64(ce_norm))?;
    let kl = tape.scale(&kl_acc.expect("≥1 component"), F::from_f64(kl_norm))?;
    Ok((ce, kl))
}

/// Posterior CE and KL for the sample-independent (invariant) variant: one
/// classifier distribution per episode, conditioned on meta-source centers
/// only; KL is a single episode-level divergence.
fn episode_level_objective<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &crate::model::StepBinds<F>,
    cfg: &TrainConfig,
    feats_q: &Tensor<F>,
    query_labels: &[usize],
    centers_post: &Tensor<F>,
    prior: &GaussianParams<F>,
    rng: &mut impl rand::Rng,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let doubled = tape.concat(&[centers_post, centers_post], 1)?;
    let posterior = binds.theta_a.forward(tape, &doubled)?;

    let mut ce_acc: Option<Tensor<F>> = None;
    for _ in 0..cfg.mc_m {
        let w = tape.reparameterize(&posterior, rng)?;
        let logits = classify(tape, &w, feats_q)?;
        let ce = tape.softmax_cross_entropy(&logits, query_labels)?;
        ce_acc = Some(match ce_acc {
            None => ce,
            Some(a) => tape.add(&a, &ce)?,
        });
    }
    let ce = tape.scale(&ce_acc.expect("mc_m ≥ 1"), F::from_f64(1.0 / cfg.mc_m as f64))?;
    let kl = tape.gaussian_kl(&posterior, prior)?;
    Ok((ce, kl))
}

// ── Training loop ───────────────────────────────────────────────────────

pub struct TrainState<F: Scalar> {
    pub model: GenerativeModel<F>,
    backbone_opt: AdamState<F>,
    heads_opt: AdamState<F>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: &TrainConfig, widths: &[usize]) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "model-init"));
        Ok(TrainState {
            model: GenerativeModel::new(&mut init_rng, widths)?,
            backbone_opt: AdamState::new(F::from_f64(cfg.lr_backbone)),
            heads_opt: AdamState::new(F::from_f64(cfg.lr_heads)),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "train-steps")),
        })
    }

    /// One optimization step: build the loss graph, backpropagate, apply
    /// one Adam update per parameter group.
    pub fn episodic_step(
        &mut self,
        corpus: &MultiDomainCorpus,
        spec: &MethodSpec,
        cfg: &TrainConfig,
    ) -> Result<LossBreakdown> {
        let batch = StepBatch::sample(corpus, spec, cfg, &mut self.rng)?;
        let mut tape = Tape::new();
        let (loss, binds) =
            build_step_loss(&mut tape, &self.model, &batch, spec, cfg, &mut self.rng)?;
        let grads = tape.backward(&loss.total).map_err(RunError::from)?;

        let bb_grads: Vec<Vec<F>> =
            binds.backbone.leaves().iter().map(|l| grads.wrt_dense(l)).collect();
        let mut head_leaves = binds.psi.leaves();
        head_leaves.extend(binds.theta_a.leaves());
        let head_grads: Vec<Vec<F>> =
            head_leaves.iter().map(|l| grads.wrt_dense(l)).collect();

        let mut bb_params = self.model.backbone.params_mut();
        let bb_refs: Vec<&[F]> = bb_grads.iter().map(|g| g.as_slice()).collect();
        adam_step(&mut bb_params, &bb_refs, &mut self.backbone_opt).map_err(RunError::from)?;

        let mut head_params = self.model.head_params_mut();
        let head_refs: Vec<&[F]> = head_grads.iter().map(|g| g.as_slice()).collect();
        adam_step(&mut head_params, &head_refs, &mut self.heads_opt).map_err(RunError::from)?;

        Ok(LossBreakdown {
            ce_posterior: loss.ce_posterior.item().to_f64(),
            ce_prior: loss.ce_prior.item().to_f64(),
            kl: loss.kl.item().to_f64(),
            total: loss.total.item().to_f64(),
        })
    }
}

/// Accuracy of the test-time per-sample path on the pooled source
/// validation splits, used for model selection.
pub fn validate<F: Scalar>(
    model: &GenerativeModel<F>,
    corpus: &MultiDomainCorpus,
    spec: &MethodSpec,
    cfg: &TrainConfig,
) -> Result<f64> {
    let ctx = InferenceContext::for_validation(model, corpus, spec, cfg)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for dom in &corpus.sources {
        for s in &dom.val {
            let (label, _) = ctx.predict_single(&s.pixels)?;
            correct += usize::from(label == s.label);
            total += 1;
        }
    }
    if total == 0 {
        return Err(RunError::data("validation split is empty"));
    }
    Ok(correct as f64 / total as f64)
}

/// Runs the full training loop with periodic validation and best-snapshot
/// selection.
pub fn train<F: Scalar>(
    corpus: &MultiDomainCorpus,
    spec: &MethodSpec,
    cfg: &TrainConfig,
    widths: &[usize],
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if spec.episodic && corpus.sources.len() < 2 {
        return Err(RunError::config(
            "data.source_angles",
            "episodic training needs ≥ 2 source domains; split a single source \
             into pseudo-domains with split_domains first",
        ));
    }
    let mut state = TrainState::<F>::new(cfg, widths)?;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best = state.model.clone();
    let mut best_val = f64::NEG_INFINITY;

    for iter in 1..=cfg.iterations {
        let loss = state
            .episodic_step(corpus, spec, cfg)
            .map_err(|e| RunError::Numeric(format!("iteration {}: {}", iter, e)))?;

        let val_accuracy = if iter % cfg.val_every == 0 {
            let acc = validate(&state.model, corpus, spec, cfg)?;
            if acc > best_val {
                best_val = acc;
                best = state.model.clone();
            }
            Some(acc)
        } else {
            None
        };
        history.push(HistoryRecord { iteration: iter, loss, val_accuracy });
    }

    if best_val == f64::NEG_INFINITY {
        // No validation point was hit (iterations < val_every); score once.
        best_val = validate(&state.model, corpus, spec, cfg)?;
        best = state.model.clone();
    }
    Ok(TrainOutcome { model: state.model, best, best_val_accuracy: best_val, history })
}

// ── History output ──────────────────────────────────────────────────────

/// Serializes history records with the stable column set
/// `iteration, ce_posterior, ce_prior, kl, total, val_accuracy`.
pub fn history_to_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::from("iteration,ce_posterior,ce_prior,kl,total,val_accuracy\n");
    for rec in history {
        let val = rec.val_accuracy.map_or(String::new(), |v| format!("{}", v));
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            rec.iteration,
            rec.loss.ce_posterior,
            rec.loss.ce_prior,
            rec.loss.kl,
            rec.loss.total,
            val
        ));
    }
    out
}

/// Moving average of the total loss over `window` iterations, used by the
/// loss-trend checks.
pub fn smoothed_total(history: &[HistoryRecord], window: usize) -> Vec<f64> {
    let totals: Vec<f64> = history.iter().map(|r| r.loss.total).collect();
    if window == 0 || totals.is_empty() {
        return totals;
    }
    let mut out = Vec::with_capacity(totals.len());
    let mut sum = 0.0;
    for i in 0..totals.len() {
        sum += totals[i];
        if i >= window {
            sum -= totals[i - window];
        }
        let n = (i + 1).min(window);
        out.push(sum / n as f64);
    }
    out
}
