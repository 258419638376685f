//! Learnable components: the feature extractor, the source-classifier
//! generator, and the shared amortization network that maps conditioning
//! inputs to Gaussian parameters over per-class classifier prototypes.
//!
//! Every network is a plain MLP over `numcore` parameters. Graph building
//! follows a bind-once pattern: `bind` creates one tape leaf per parameter
//! for the current step, forwards reuse those leaves (fan-out accumulates
//! gradients on a single node), and `leaves()` returns them in the same
//! order as `params()` so the optimizer can be driven positionally.

use numcore::{GaussianParams, Parameter, Scalar, Tape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, RunError};

/// Default backbone layer widths: flattened 28×28 input to feature
/// dimension 64 through two hidden layers.
pub const DEFAULT_WIDTHS: [usize; 4] = [784, 256, 128, 64];

/// Initial bias of every log-variance head output. Starts the generated
/// distributions tight enough that reparameterized draws are informative
/// but not so tight that the KL mean-matching term explodes.
pub const LOGVAR_BIAS_INIT: f64 = -4.0;

// ── Dense layers ────────────────────────────────────────────────────────

/// One affine layer, y = xW + b, with W stored as (fan_in, fan_out).
#[derive(Clone, Debug)]
pub struct Dense<F: Scalar> {
    pub w: Parameter<F>,
    pub b: Parameter<F>,
}

impl<F: Scalar> Dense<F> {
    /// He-normal weight initialization (std √(2/fan_in)), zero biases.
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self::with_std(rng, fan_in, fan_out, (2.0 / fan_in as f64).sqrt())
    }

    /// Xavier-style initialization for heads without a following relu.
    pub fn new_linear_out(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self::with_std(rng, fan_in, fan_out, (1.0 / fan_in as f64).sqrt())
    }

    fn with_std(rng: &mut impl Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let w = (0..fan_in * fan_out)
            .map(|_| F::from_f64(normal.sample(rng)))
            .collect();
        Dense {
            w: Parameter::new(w, &[fan_in, fan_out]).expect("fresh init is finite"),
            b: Parameter::zeros(&[fan_out]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Result<DenseBind<F>> {
        Ok(DenseBind { w: tape.leaf(&self.w)?, b: tape.leaf(&self.b)? })
    }
}

pub struct DenseBind<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> DenseBind<F> {
    pub fn affine(&self, tape: &mut Tape<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let xw = tape.matmul(x, &self.w)?;
        Ok(tape.add(&xw, &self.b)?)
    }
}

// ── Feature extractor ───────────────────────────────────────────────────

/// MLP feature extractor; relu after every affine layer, so features are
/// non-negative.
#[derive(Clone, Debug)]
pub struct Backbone<F: Scalar> {
    layers: Vec<Dense<F>>,
    widths: Vec<usize>,
}

impl<F: Scalar> Backbone<F> {
    pub fn new(rng: &mut impl Rng, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(RunError::config(
                "model.widths",
                "backbone needs at least an input and an output width",
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(RunError::config("model.widths", "layer widths must be positive"));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense::new(rng, w[0], w[1]))
            .collect();
        Ok(Backbone { layers, widths: widths.to_vec() })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Result<BackboneBind<F>> {
        let layers = self.layers.iter().map(|l| l.bind(tape)).collect::<Result<_>>()?;
        Ok(BackboneBind { layers })
    }
}

pub struct BackboneBind<F: Scalar> {
    layers: Vec<DenseBind<F>>,
}

impl<F: Scalar> BackboneBind<F> {
    /// Maps an image batch (B, input_dim) to features (B, d). Rows are
    /// independent: every op acts row-wise.
    pub fn features(&self, tape: &mut Tape<F>, images: &Tensor<F>) -> Result<Tensor<F>> {
        let mut x = images.clone();
        for layer in &self.layers {
            let pre = layer.affine(tape, &x)?;
            x = tape.relu(&pre)?;
        }
        Ok(x)
    }

    pub fn leaves(&self) -> Vec<&Tensor<F>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }
}

// ── Gaussian generator heads ────────────────────────────────────────────

/// One-hidden-layer MLP emitting (mean, logvar) pairs of dimension `d`:
/// input → relu(hidden) → 2d raw outputs, split and logvar-clamped.
#[derive(Clone, Debug)]
pub struct GaussianHead<F: Scalar> {
    hidden: Dense<F>,
    out: Dense<F>,
    d: usize,
}

impl<F: Scalar> GaussianHead<F> {
    pub fn new(rng: &mut impl Rng, input_dim: usize, d: usize) -> Self {
        let hidden = Dense::new(rng, input_dim, 2 * d);
        let mut out = Dense::new_linear_out(rng, 2 * d, 2 * d);
        for entry in &mut out.b.data[d..] {
            *entry = F::from_f64(LOGVAR_BIAS_INIT);
        }
        GaussianHead { hidden, out, d }
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        vec![&self.hidden.w, &self.hidden.b, &self.out.w, &self.out.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        vec![&mut self.hidden.w, &mut self.hidden.b, &mut self.out.w, &mut self.out.b]
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Result<HeadBind<F>> {
        Ok(HeadBind {
            hidden: self.hidden.bind(tape)?,
            out: self.out.bind(tape)?,
            d: self.d,
        })
    }
}

pub struct HeadBind<F: Scalar> {
    hidden: DenseBind<F>,
    out: DenseBind<F>,
    d: usize,
}

impl<F: Scalar> HeadBind<F> {
    /// Applies the head row-wise: (R, input_dim) → Gaussian over (R, d).
    pub fn forward(&self, tape: &mut Tape<F>, x: &Tensor<F>) -> Result<GaussianParams<F>> {
        let pre = self.hidden.affine(tape, x)?;
        let h = tape.relu(&pre)?;
        let raw = self.out.affine(tape, &h)?;
        debug_assert_eq!(raw.shape()[1], 2 * self.d);
        Ok(tape.split_gaussian(&raw)?)
    }

    pub fn leaves(&self) -> Vec<&Tensor<F>> {
        vec![&self.hidden.w, &self.hidden.b, &self.out.w, &self.out.b]
    }
}

/// Full model: feature extractor plus the two generator networks. The
/// amortization head is a single storage used by both the prior path and
/// the posterior path.
#[derive(Clone, Debug)]
pub struct GenerativeModel<F: Scalar> {
    pub backbone: Backbone<F>,
    /// Source-classifier generator: d-dim class center → Gaussian over d.
    pub psi: GaussianHead<F>,
    /// Shared amortization network: 2d-dim conditioning → Gaussian over d.
    pub theta_a: GaussianHead<F>,
}

impl<F: Scalar> GenerativeModel<F> {
    pub fn new(rng: &mut impl Rng, widths: &[usize]) -> Result<Self> {
        let backbone = Backbone::new(rng, widths)?;
        let d = backbone.feature_dim();
        let psi = GaussianHead::new(rng, d, d);
        let theta_a = GaussianHead::new(rng, 2 * d, d);
        Ok(GenerativeModel { backbone, psi, theta_a })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Generator ("head") parameters: ψ and θ_a, one optimizer group.
    pub fn head_params(&self) -> Vec<&Parameter<F>> {
        let mut p = self.psi.params();
        p.extend(self.theta_a.params());
        p
    }

    pub fn head_params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let (psi, theta) = (&mut self.psi, &mut self.theta_a);
        let mut p = psi.params_mut();
        p.extend(theta.params_mut());
        p
    }

    /// Binds every network onto `tape` for one step. Leaf order inside
    /// each bind matches the corresponding `params()` order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Result<StepBinds<F>> {
        Ok(StepBinds {
            backbone: self.backbone.bind(tape)?,
            psi: self.psi.bind(tape)?,
            theta_a: self.theta_a.bind(tape)?,
        })
    }
}

/// All three networks bound onto one tape.
pub struct StepBinds<F: Scalar> {
    pub backbone: BackboneBind<F>,
    pub psi: HeadBind<F>,
    pub theta_a: HeadBind<F>,
}

// ── Inference-path building blocks ──────────────────────────────────────

/// Tiles a (1, d) row into (rows, d) via a constant ones matmul, keeping
/// the result differentiable w.r.t. the row.
pub fn tile_row<F: Scalar>(
    tape: &mut Tape<F>,
    row: &Tensor<F>,
    rows: usize,
) -> Result<Tensor<F>> {
    let ones = Tensor::filled(F::one(), &[rows, 1]);
    Ok(tape.matmul(&ones, row)?)
}

/// Builds the constant (C, N) averaging matrix realizing compute_centers:
/// row c averages the per-domain class-c means uniformly across the
/// domains in `domain_set`.
fn center_matrix<F: Scalar>(
    labels: &[usize],
    domain_ids: &[usize],
    domain_set: &[usize],
    n_classes: usize,
) -> Result<Vec<F>> {
    if labels.len() != domain_ids.len() {
        return Err(RunError::data(format!(
            "{} label(s) vs {} domain id(s)",
            labels.len(),
            domain_ids.len()
        )));
    }
    let n = labels.len();
    let mut counts = vec![vec![0usize; n_classes]; domain_set.len()];
    for (&l, &dom) in labels.iter().zip(domain_ids) {
        if l >= n_classes {
            return Err(RunError::data(format!("label {} out of range", l)));
        }
        if let Some(slot) = domain_set.iter().position(|&d| d == dom) {
            counts[slot][l] += 1;
        }
    }
    let mut mat = vec![F::zero(); n_classes * n];
    for c in 0..n_classes {
        let present: Vec<usize> =
            (0..domain_set.len()).filter(|&s| counts[s][c] > 0).collect();
        if present.is_empty() {
            return Err(RunError::data(format!(
                "class {} has no support samples in the requested domain set",
                c
            )));
        }
        for (j, (&l, &dom)) in labels.iter().zip(domain_ids).enumerate() {
            if l != c {
                continue;
            }
            if let Some(slot) = domain_set.iter().position(|&d| d == dom) {
                if counts[slot][c] > 0 {
                    mat[c * n + j] =
                        F::from_f64(1.0 / (present.len() as f64 * counts[slot][c] as f64));
                }
            }
        }
    }
    Ok(mat)
}

/// Per-class center features: for each class, the per-domain mean feature
/// over that domain's class support, averaged uniformly across the listed
/// domains. Output is (C, d), differentiable through `features`.
pub fn compute_centers<F: Scalar>(
    tape: &mut Tape<F>,
    features: &Tensor<F>,
    labels: &[usize],
    domain_ids: &[usize],
    domain_set: &[usize],
    n_classes: usize,
) -> Result<Tensor<F>> {
    let (n, _) = features.dims2().map_err(RunError::from)?;
    if n != labels.len() {
        return Err(RunError::data(format!(
            "{} feature row(s) vs {} label(s)",
            n,
            labels.len()
        )));
    }
    let mat = center_matrix::<F>(labels, domain_ids, domain_set, n_classes)?;
    let avg = Tensor::from_vec(mat, &[n_classes, n]).map_err(RunError::from)?;
    Ok(tape.matmul(&avg, features)?)
}

/// Applies the generated classifier: logits[b][c] = ⟨w_c, features[b]⟩
/// (pure dot product, no bias — prototype semantics).
pub fn classify<F: Scalar>(
    tape: &mut Tape<F>,
    w: &Tensor<F>,
    features: &Tensor<F>,
) -> Result<Tensor<F>> {
    let wt = tape.transpose(w)?;
    Ok(tape.matmul(features, &wt)?)
}

/// Prior-path conditioning: θ_a(concat(center_c, center_c)). The centers
/// are duplicated so the prior path matches the 2d posterior-path arity
/// while sharing one network.
pub fn infer_prior_classifier<F: Scalar>(
    tape: &mut Tape<F>,
    theta_a: &HeadBind<F>,
    centers: &Tensor<F>,
) -> Result<GaussianParams<F>> {
    let doubled = tape.concat(&[centers, centers], 1)?;
    theta_a.forward(tape, &doubled)
}

/// Source-classifier distribution: ψ applied per class row of the
/// meta-source centers.
pub fn infer_source_classifier<F: Scalar>(
    tape: &mut Tape<F>,
    psi: &HeadBind<F>,
    centers: &Tensor<F>,
) -> Result<GaussianParams<F>> {
    psi.forward(tape, centers)
}

/// Posterior-path conditioning for one sample: θ_a(concat(w_s[c], φ(x)))
/// per class. `w_s` is (C, d); `feature` is the sample's (1, d) feature,
/// tiled across classes.
pub fn infer_posterior_classifier<F: Scalar>(
    tape: &mut Tape<F>,
    theta_a: &HeadBind<F>,
    w_s: &Tensor<F>,
    feature: &Tensor<F>,
) -> Result<GaussianParams<F>> {
    let (c, _) = w_s.dims2().map_err(RunError::from)?;
    let tiled = tile_row(tape, feature, c)?;
    let joined = tape.concat(&[w_s, &tiled], 1)?;
    theta_a.forward(tape, &joined)
}
