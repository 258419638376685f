//! Comparison methods: ERM with per-layer feature standardization, the
//! entropy-minimization test-time adapter that retunes the normalization
//! affines, and the ablation variants of the episodic objective expressed
//! as `MethodSpec` toggles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use numcore::{adam_step, AdamState, Parameter, Scalar, Tape, Tensor};

use crate::data::{mix_seed, LabeledImage, MultiDomainCorpus};
use crate::error::{Result, RunError};
use crate::model::Dense;
use crate::trainer::{HistoryRecord, LossBreakdown, MethodSpec, TrainConfig};

// ── Baseline selection ──────────────────────────────────────────────────

/// Every comparison method a run can select. The amortized variants map
/// onto `MethodSpec` toggles of the shared trainer; ERM and Tent have
/// their own model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Erm,
    InvariantAmortized,
    NoHierarchy,
    NoPriorSupervision,
    NonMeta,
    TentAdapt,
}

impl BaselineKind {
    /// The objective toggles for the amortized variants; `None` for the
    /// methods that do not run through the episodic trainer.
    pub fn method_spec(&self) -> Option<MethodSpec> {
        let full = MethodSpec::full();
        match self {
            BaselineKind::Erm | BaselineKind::TentAdapt => None,
            BaselineKind::InvariantAmortized => Some(MethodSpec {
                hierarchical: false,
                prior_supervision: false,
                sample_conditioning: false,
                episodic: true,
            }),
            BaselineKind::NoHierarchy => Some(MethodSpec { hierarchical: false, ..full }),
            BaselineKind::NoPriorSupervision => {
                Some(MethodSpec { prior_supervision: false, ..full })
            }
            BaselineKind::NonMeta => Some(MethodSpec { episodic: false, ..full }),
        }
    }
}

// ── Feature standardization with learnable affine ───────────────────────

const NORM_EPS: f64 = 1e-5;
/// Fraction of each batch statistic folded into the running estimate.
const NORM_MOMENTUM: f64 = 0.1;

/// Per-layer feature standardization: running mean/variance gathered
/// during training, frozen afterwards, followed by learnable scale γ and
/// shift β. Only γ and β adapt during entropy minimization.
#[derive(Clone, Debug)]
pub struct AffineNorm<F: Scalar> {
    /// Shape (1, width) so it can be tiled across the batch.
    pub gamma: Parameter<F>,
    /// Shape (width,), applied as a row-broadcast bias.
    pub beta: Parameter<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

impl<F: Scalar> AffineNorm<F> {
    pub fn new(width: usize) -> Self {
        AffineNorm {
            gamma: Parameter::new(vec![F::one(); width], &[1, width])
                .expect("ones are finite"),
            beta: Parameter::zeros(&[width]),
            running_mean: vec![F::zero(); width],
            running_var: vec![F::one(); width],
        }
    }

    fn width(&self) -> usize {
        self.beta.len()
    }
}

fn tile_rows<F: Scalar>(tape: &mut Tape<F>, row: &Tensor<F>, rows: usize) -> Result<Tensor<F>> {
    let ones = Tensor::filled(F::one(), &[rows, 1]);
    Ok(tape.matmul(&ones, row)?)
}

/// x − tiled(row), keeping both differentiable.
fn sub_row<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    row: &Tensor<F>,
    rows: usize,
) -> Result<Tensor<F>> {
    let tiled = tile_rows(tape, row, rows)?;
    let neg = tape.scale(&tiled, F::from_f64(-1.0))?;
    Ok(tape.add(x, &neg)?)
}

/// (row + eps)^(-1/2) via exp(−½·log(row + eps)).
fn rsqrt_row<F: Scalar>(tape: &mut Tape<F>, row: &Tensor<F>) -> Result<Tensor<F>> {
    let w = row.shape()[1];
    let eps = Tensor::filled(F::from_f64(NORM_EPS), &[w]);
    let shifted = tape.add(row, &eps)?;
    let lg = tape.log(&shifted)?;
    let scaled = tape.scale(&lg, F::from_f64(-0.5))?;
    Ok(tape.exp(&scaled)?)
}

// ── ERM model ───────────────────────────────────────────────────────────

/// Supervised baseline: the same MLP widths as the generative backbone,
/// feature standardization after every hidden affine, and a fixed linear
/// classification head.
#[derive(Clone, Debug)]
pub struct ErmModel<F: Scalar> {
    pub layers: Vec<Dense<F>>,
    pub norms: Vec<AffineNorm<F>>,
    pub head: Dense<F>,
    n_classes: usize,
}

/// Which statistics the normalization layers consume.
#[derive(Clone, Copy, PartialEq, Eq)]
enum NormStats {
    /// In-graph batch statistics; running estimates updated as a side
    /// effect (training).
    Batch,
    /// Frozen running statistics (evaluation and Tent adaptation).
    Running,
}

impl<F: Scalar> ErmModel<F> {
    pub fn new(rng: &mut impl rand::Rng, widths: &[usize], n_classes: usize) -> Result<Self> {
        if widths.len() < 2 {
            return Err(RunError::config(
                "model.widths",
                "backbone needs at least an input and an output width",
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(RunError::config("model.widths", "layer widths must be positive"));
        }
        let layers: Vec<Dense<F>> =
            widths.windows(2).map(|w| Dense::new(rng, w[0], w[1])).collect();
        let norms = widths[1..].iter().map(|&w| AffineNorm::new(w)).collect();
        let head = Dense::new_linear_out(rng, *widths.last().unwrap(), n_classes);
        Ok(ErmModel { layers, norms, head, n_classes })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape[0]
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Backbone + head parameters, excluding the normalization affines.
    pub fn net_params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut p: Vec<&mut Parameter<F>> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect();
        p.push(&mut self.head.w);
        p.push(&mut self.head.b);
        p
    }

    pub fn norm_params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        self.norms
            .iter_mut()
            .flat_map(|n| [&mut n.gamma, &mut n.beta])
            .collect()
    }
}

/// One bound forward pass of the ERM network. When `stats` is `Batch` the
/// caller must pass `&mut` norms to receive the running-estimate update;
/// the forward itself never mutates graph state.
struct ErmBind<F: Scalar> {
    layers: Vec<crate::model::DenseBind<F>>,
    gammas: Vec<Tensor<F>>,
    betas: Vec<Tensor<F>>,
    head: crate::model::DenseBind<F>,
}

impl<F: Scalar> ErmBind<F> {
    fn new(tape: &mut Tape<F>, model: &ErmModel<F>) -> Result<Self> {
        Ok(ErmBind {
            layers: model
                .layers
                .iter()
                .map(|l| l.bind(tape))
                .collect::<Result<_>>()?,
            gammas: model
                .norms
                .iter()
                .map(|n| tape.leaf(&n.gamma))
                .collect::<std::result::Result<_, _>>()?,
            betas: model
                .norms
                .iter()
                .map(|n| tape.leaf(&n.beta))
                .collect::<std::result::Result<_, _>>()?,
            head: model.head.bind(tape)?,
        })
    }

    /// Forward to logits. With `NormStats::Batch`, per-column batch
    /// mean/variance are standardized in-graph and returned so the caller
    /// can fold them into the running estimates.
    fn logits(
        &self,
        tape: &mut Tape<F>,
        model: &ErmModel<F>,
        x: &Tensor<F>,
        stats: NormStats,
    ) -> Result<(Tensor<F>, Vec<(Vec<F>, Vec<F>)>)> {
        let mut h = x.clone();
        let mut batch_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.affine(tape, &h)?;
            let (rows, w) = pre.dims2().map_err(RunError::from)?;
            let normalized = match stats {
                NormStats::Batch => {
                    let ones = Tensor::filled(F::from_f64(1.0 / rows as f64), &[1, rows]);
                    let mean = tape.matmul(&ones, &pre)?;
                    let centered = sub_row(tape, &pre, &mean, rows)?;
                    let sq = tape.mul(&centered, &centered)?;
                    let var = tape.matmul(&ones, &sq)?;
                    batch_stats.push((mean.data().to_vec(), var.data().to_vec()));
                    let inv = rsqrt_row(tape, &var)?;
                    let inv_tiled = tile_rows(tape, &inv, rows)?;
                    tape.mul(&centered, &inv_tiled)?
                }
                NormStats::Running => {
                    let norm = &model.norms[i];
                    let rm = Tensor::from_vec(norm.running_mean.clone(), &[1, w])
                        .map_err(RunError::from)?;
                    let scale: Vec<F> = norm
                        .running_var
                        .iter()
                        .map(|&v| {
                            F::from_f64(1.0 / (v.to_f64() + NORM_EPS).sqrt())
                        })
                        .collect();
                    let sc =
                        Tensor::from_vec(scale, &[1, w]).map_err(RunError::from)?;
                    let centered = sub_row(tape, &pre, &rm, rows)?;
                    let sc_tiled = tile_rows(tape, &sc, rows)?;
                    tape.mul(&centered, &sc_tiled)?
                }
            };
            let g_tiled = tile_rows(tape, &self.gammas[i], rows)?;
            let scaled = tape.mul(&normalized, &g_tiled)?;
            let shifted = tape.add(&scaled, &self.betas[i])?;
            h = tape.relu(&shifted)?;
        }
        let logits = self.head.affine(tape, &h)?;
        Ok((logits, batch_stats))
    }
}

fn stack_rows<F: Scalar>(rows: &[&LabeledImage]) -> Result<Tensor<F>> {
    let pixels = rows.first().map_or(0, |s| s.pixels.len());
    let mut flat = Vec::with_capacity(rows.len() * pixels);
    for s in rows {
        flat.extend(s.pixels.iter().map(|&p| F::from_f64(f64::from(p))));
    }
    Tensor::from_vec(flat, &[rows.len(), pixels]).map_err(RunError::from)
}

/// Evaluation-mode logits for a batch of images (frozen statistics).
pub fn erm_logits<F: Scalar>(model: &ErmModel<F>, rows: &[&LabeledImage]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::eval_only();
    let bind = ErmBind::new(&mut tape, model)?;
    let x = stack_rows::<F>(rows)?;
    let (logits, _) = bind.logits(&mut tape, model, &x, NormStats::Running)?;
    let (_, c) = logits.dims2().map_err(RunError::from)?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|r| r.iter().map(|&v| v.to_f64()).collect())
        .collect())
}

/// Evaluation-mode accuracy over a sample iterator.
pub fn erm_accuracy<'a, F: Scalar>(
    model: &ErmModel<F>,
    samples: impl IntoIterator<Item = &'a LabeledImage>,
) -> Result<f64> {
    let rows: Vec<&LabeledImage> = samples.into_iter().collect();
    if rows.is_empty() {
        return Err(RunError::data("accuracy over an empty sample set"));
    }
    let logits = erm_logits(model, &rows)?;
    let correct = logits
        .iter()
        .zip(&rows)
        .filter(|(l, s)| crate::eval::argmax(l) == s.label)
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

/// Outcome of ERM training, mirroring the episodic trainer's shape.
pub struct ErmOutcome<F: Scalar> {
    pub model: ErmModel<F>,
    pub best: ErmModel<F>,
    pub best_val_accuracy: f64,
    pub history: Vec<HistoryRecord>,
}

/// Standard supervised training of the normalized backbone plus a linear
/// head on pooled source data: plain cross-entropy, the same two-group
/// optimizer settings as the episodic trainer, validation-selected
/// snapshot. Domain identifiers are never consulted.
pub fn train_erm<F: Scalar>(
    corpus: &MultiDomainCorpus,
    cfg: &TrainConfig,
    widths: &[usize],
) -> Result<ErmOutcome<F>> {
    cfg.validate()?;
    let pooled: Vec<&LabeledImage> =
        corpus.sources.iter().flat_map(|d| d.train.iter()).collect();
    if pooled.len() < cfg.batch {
        return Err(RunError::data(format!(
            "pooled source set has {} sample(s), need {} for a batch",
            pooled.len(),
            cfg.batch
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "model-init"));
    let mut model = ErmModel::<F>::new(&mut init_rng, widths, corpus.n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "train-steps"));
    let mut net_opt = AdamState::new(F::from_f64(cfg.lr_backbone));
    let mut norm_opt = AdamState::new(F::from_f64(cfg.lr_heads));

    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;

    for iter in 1..=cfg.iterations {
        let picks = rand::seq::index::sample(&mut rng, pooled.len(), cfg.batch);
        let rows: Vec<&LabeledImage> = picks.iter().map(|i| pooled[i]).collect();
        let labels: Vec<usize> = rows.iter().map(|s| s.label).collect();

        let mut tape = Tape::new();
        let bind = ErmBind::new(&mut tape, &model)?;
        let x = stack_rows::<F>(&rows)?;
        let (logits, batch_stats) = bind.logits(&mut tape, &model, &x, NormStats::Batch)?;
        let loss = tape
            .softmax_cross_entropy(&logits, &labels)
            .map_err(|e| RunError::Numeric(format!("iteration {}: {}", iter, e)))?;
        let grads = tape
            .backward(&loss)
            .map_err(|e| RunError::Numeric(format!("iteration {}: {}", iter, e)))?;

        let mut net_leaves: Vec<&Tensor<F>> =
            bind.layers.iter().flat_map(|l| [&l.w, &l.b]).collect();
        net_leaves.push(&bind.head.w);
        net_leaves.push(&bind.head.b);
        let net_grads: Vec<Vec<F>> = net_leaves.iter().map(|l| grads.wrt_dense(l)).collect();
        let mut norm_leaves: Vec<&Tensor<F>> = Vec::new();
        for (g, b) in bind.gammas.iter().zip(&bind.betas) {
            norm_leaves.push(g);
            norm_leaves.push(b);
        }
        let norm_grads: Vec<Vec<F>> = norm_leaves.iter().map(|l| grads.wrt_dense(l)).collect();

        // Fold batch statistics into the running estimates (outside the
        // graph, after the step's forward).
        let momentum = F::from_f64(NORM_MOMENTUM);
        let keep = F::from_f64(1.0 - NORM_MOMENTUM);
        for (norm, (mean, var)) in model.norms.iter_mut().zip(&batch_stats) {
            debug_assert_eq!(norm.width(), mean.len());
            for j in 0..mean.len() {
                norm.running_mean[j] = keep * norm.running_mean[j] + momentum * mean[j];
                norm.running_var[j] = keep * norm.running_var[j] + momentum * var[j];
            }
        }

        {
            let mut net_params = model.net_params_mut();
            let refs: Vec<&[F]> = net_grads.iter().map(|g| g.as_slice()).collect();
            adam_step(&mut net_params, &refs, &mut net_opt).map_err(RunError::from)?;
        }
        {
            let mut norm_params = model.norm_params_mut();
            let refs: Vec<&[F]> = norm_grads.iter().map(|g| g.as_slice()).collect();
            adam_step(&mut norm_params, &refs, &mut norm_opt).map_err(RunError::from)?;
        }

        let ce = loss.item().to_f64();
        let val_accuracy = if iter % cfg.val_every == 0 {
            let acc = erm_accuracy(
                &model,
                corpus.sources.iter().flat_map(|d| d.val.iter()),
            )?;
            if acc > best_val {
                best_val = acc;
                best = model.clone();
            }
            Some(acc)
        } else {
            None
        };
        history.push(HistoryRecord {
            iteration: iter,
            loss: LossBreakdown { ce_posterior: ce, ce_prior: 0.0, kl: 0.0, total: ce },
            val_accuracy,
        });
    }
    if best_val == f64::NEG_INFINITY {
        best_val = erm_accuracy(&model, corpus.sources.iter().flat_map(|d| d.val.iter()))?;
        best = model.clone();
    }
    Ok(ErmOutcome { model, best, best_val_accuracy: best_val, history })
}

// ── Tent adaptation ─────────────────────────────────────────────────────

/// How a test stream is composed. Single-domain streams hold one target
/// domain; multi-domain streams interleave all targets without domain
/// identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamMode {
    SingleDomain,
    MultiDomain,
}

/// Test-time adaptation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TentConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub stream_mode: StreamMode,
}

impl Default for TentConfig {
    fn default() -> Self {
        TentConfig {
            batch_size: 128,
            steps: 10,
            lr: 1e-3,
            stream_mode: StreamMode::SingleDomain,
        }
    }
}

impl TentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RunError::config("baseline.tent.batch_size", "must be ≥ 1"));
        }
        if self.steps == 0 {
            return Err(RunError::config("baseline.tent.steps", "must be ≥ 1"));
        }
        if !(self.lr > 0.0) {
            return Err(RunError::config("baseline.tent.lr", "must be > 0"));
        }
        Ok(())
    }
}

/// Entropy-minimization adaptation over one ordered stream of batches.
/// For each batch, runs `cfg.steps` gradient steps on the mean prediction
/// entropy w.r.t. the normalization affines (γ, β) only, then records the
/// batch's predictions with the adapted parameters. Adaptation state
/// carries across batches (online); each call starts fresh, so separate
/// streams are independent.
///
/// `steps == 0` or `lr == 0` are accepted here (though rejected by config
/// validation) and reproduce the unadapted model exactly.
pub fn tent_adapt<F: Scalar>(
    model: &ErmModel<F>,
    stream: &[Vec<&LabeledImage>],
    cfg: &TentConfig,
) -> Result<Vec<usize>> {
    Ok(tent_adapt_traced(model, stream, cfg)?.0)
}

/// Like [`tent_adapt`] but also returns the model as it stands after the
/// final batch, so callers can inspect or continue the adapted state.
pub fn tent_adapt_traced<F: Scalar>(
    model: &ErmModel<F>,
    stream: &[Vec<&LabeledImage>],
    cfg: &TentConfig,
) -> Result<(Vec<usize>, ErmModel<F>)> {
    if let Some(i) = stream.iter().position(|b| b.is_empty()) {
        return Err(RunError::data(format!("stream batch {} is empty", i)));
    }
    // Work on a copy: the caller's model stays unadapted.
    let mut adapted = model.clone();
    let mut opt = AdamState::new(F::from_f64(cfg.lr));
    let mut predictions = Vec::new();

    for batch in stream {
        let x = stack_rows::<F>(batch)?;
        for _ in 0..cfg.steps {
            let mut tape = Tape::new();
            let bind = ErmBind::new(&mut tape, &adapted)?;
            let (logits, _) = bind.logits(&mut tape, &adapted, &x, NormStats::Running)?;
            let lsm = tape.log_softmax_rows(&logits).map_err(RunError::from)?;
            let p = tape.exp(&lsm).map_err(RunError::from)?;
            let plogp = tape.mul(&p, &lsm).map_err(RunError::from)?;
            let m = tape.mean(&plogp).map_err(RunError::from)?;
            // mean over (B, C) entries of p·log p, rescaled to the mean
            // over samples of −Σ_c p log p.
            let c = adapted.n_classes() as f64;
            let entropy = tape.scale(&m, F::from_f64(-c)).map_err(RunError::from)?;
            let grads = tape.backward(&entropy).map_err(RunError::from)?;

            let mut leaves: Vec<&Tensor<F>> = Vec::new();
            for (g, b) in bind.gammas.iter().zip(&bind.betas) {
                leaves.push(g);
                leaves.push(b);
            }
            let gvals: Vec<Vec<F>> = leaves.iter().map(|l| grads.wrt_dense(l)).collect();
            let mut params = adapted.norm_params_mut();
            let refs: Vec<&[F]> = gvals.iter().map(|g| g.as_slice()).collect();
            adam_step(&mut params, &refs, &mut opt).map_err(RunError::from)?;
        }
        let logits = erm_logits(&adapted, batch)?;
        predictions.extend(logits.iter().map(|l| crate::eval::argmax(l)));
    }
    Ok((predictions, adapted))
}

/// Mean prediction entropy (nats) of the evaluation-mode model on a batch;
/// exposed for the adaptation tests.
pub fn mean_prediction_entropy<F: Scalar>(
    model: &ErmModel<F>,
    batch: &[&LabeledImage],
) -> Result<f64> {
    let logits = erm_logits(model, batch)?;
    let mut total = 0.0;
    for row in &logits {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for &v in row {
            let p = (v - mx).exp() / denom;
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    Ok(total / logits.len() as f64)
}
