use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use ndarray::ArrayViewMut2;

use crate::error::{NumError, Result};
use crate::gaussian::GaussianParams;
use crate::scalar::Scalar;
use crate::tensor::{NodeRef, Parameter, Tensor};

// Tape generations get globally unique ids so a tensor handle can never be
// resolved against the wrong tape after a clear() or across tapes.
static EPOCH: AtomicU64 = AtomicU64::new(1);

fn next_epoch() -> u64 {
    EPOCH.fetch_add(1, Ordering::Relaxed)
}

// ── Operations ───────────────────────────────────────────────────────────

/// Primitive kinds accepted by `Tape::apply_primitive`. Fused operations
/// (softmax cross-entropy, Gaussian KL, reparameterized sampling) have
/// dedicated entry points because they carry extra state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrimOp<F: Scalar> {
    Matmul,
    Add,
    Mul,
    Relu,
    Exp,
    Log,
    Mean,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Scale { factor: F },
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    Matmul,
    Transpose,
    Add { bias: bool },
    Mul,
    Relu,
    Exp,
    Log,
    Mean,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Scale { factor: F },
    SoftmaxCrossEntropy { labels: Rc<Vec<usize>>, probs: Rc<Vec<F>> },
    LogSoftmaxRows,
    GaussianKl,
    Reparam { eps: Rc<Vec<F>> },
}

#[derive(Debug)]
struct InputSlot<F: Scalar> {
    data: Rc<Vec<F>>,
    shape: Vec<usize>,
    node: Option<usize>,
}

#[derive(Debug)]
struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<InputSlot<F>>,
    out: Rc<Vec<F>>,
}

/// Wengert tape. One tape instance serves one training step (or one
/// evaluation); `clear` (or dropping the tape) discards the graph, and
/// node ids are never shared between generations.
pub struct Tape<F: Scalar> {
    epoch: u64,
    recording: bool,
    nodes: Vec<Node<F>>,
}

/// Gradient map produced by `backward`: one optional buffer per node of the
/// tape generation it was computed on. Nodes off the loss path have no
/// entry (their gradient is identically zero).
pub struct Gradients<F: Scalar> {
    epoch: u64,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `t`, if `t` is tracked on the
    /// same tape generation and received any gradient.
    pub fn wrt(&self, t: &Tensor<F>) -> Option<&[F]> {
        let nr = t.node?;
        if nr.epoch != self.epoch {
            return None;
        }
        self.grads.get(nr.id)?.as_deref()
    }

    /// Dense gradient for `t`, zero-filled when no gradient flowed.
    pub fn wrt_dense(&self, t: &Tensor<F>) -> Vec<F> {
        match self.wrt(t) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); t.len()],
        }
    }
}

// ── Shared kernels ───────────────────────────────────────────────────────

/// C (m,n) = A_logical (m,k) × B_logical (k,n), optionally accumulating.
/// `ta`/`tb` mark operands that are physically stored transposed.
fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    out: &mut [F],
    accumulate: bool,
) {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs shape").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs shape")
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs shape").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs shape")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    let beta = if accumulate { F::one() } else { F::zero() };
    general_mat_mul(F::one(), &av, &bv, beta, &mut cv);
}

fn all_finite<F: Scalar>(xs: &[F]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    /// Recording tape for a training step.
    pub fn new() -> Self {
        Tape { epoch: next_epoch(), recording: true, nodes: Vec::new() }
    }

    /// Non-recording tape: operations compute values but build no graph.
    /// Used for inference and for finite-difference re-evaluations.
    pub fn eval_only() -> Self {
        Tape { epoch: next_epoch(), recording: false, nodes: Vec::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops the graph and starts a new generation; tensors from earlier
    /// generations are rejected by subsequent operations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.epoch = next_epoch();
    }

    fn slot(&self, t: &Tensor<F>, op: &'static str) -> Result<InputSlot<F>> {
        let node = match t.node {
            None => None,
            Some(nr) => {
                if nr.epoch != self.epoch {
                    return Err(NumError::contract(
                        op,
                        "input tensor belongs to a different tape generation",
                    ));
                }
                Some(nr.id)
            }
        };
        Ok(InputSlot { data: t.data_rc(), shape: t.shape().to_vec(), node })
    }

    fn push(
        &mut self,
        op: Op<F>,
        inputs: Vec<InputSlot<F>>,
        out: Vec<F>,
        shape: Vec<usize>,
        opname: &'static str,
    ) -> Result<Tensor<F>> {
        if !all_finite(&out) {
            return Err(NumError::NonFinite { op: opname });
        }
        let out = Rc::new(out);
        let tracked = self.recording && inputs.iter().any(|s| s.node.is_some());
        if tracked {
            let id = self.nodes.len();
            self.nodes.push(Node { op, inputs, out: Rc::clone(&out) });
            Ok(Tensor::tracked(out, shape, NodeRef { epoch: self.epoch, id }))
        } else {
            Ok(Tensor::untracked(out, shape))
        }
    }

    /// Registers a parameter's current values as a differentiable leaf.
    /// On a non-recording tape this degrades to a plain constant.
    pub fn leaf(&mut self, p: &Parameter<F>) -> Result<Tensor<F>> {
        if !all_finite(&p.data) {
            return Err(NumError::NonFinite { op: "leaf" });
        }
        let data = Rc::new(p.data.clone());
        if !self.recording {
            return Ok(Tensor::untracked(data, p.shape.clone()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), out: Rc::clone(&data) });
        Ok(Tensor::tracked(data, p.shape.clone(), NodeRef { epoch: self.epoch, id }))
    }

    /// Same as `leaf` but starting from a tensor value.
    pub fn leaf_tensor(&mut self, t: &Tensor<F>) -> Result<Tensor<F>> {
        let p = Parameter::new(t.data().to_vec(), t.shape())?;
        self.leaf(&p)
    }

    // ── Primitives ───────────────────────────────────────────────────────

    /// Uniform dispatch over the primitive set; model code normally calls
    /// the named methods, while property tests enumerate `PrimOp`s.
    pub fn apply_primitive(&mut self, op: PrimOp<F>, inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let want = |n: usize, name: &'static str| -> Result<()> {
            if inputs.len() != n {
                return Err(NumError::contract(
                    name,
                    format!("expected {} inputs, got {}", n, inputs.len()),
                ));
            }
            Ok(())
        };
        match op {
            PrimOp::Matmul => {
                want(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimOp::Add => {
                want(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            PrimOp::Mul => {
                want(2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            PrimOp::Relu => {
                want(1, "relu")?;
                self.relu(inputs[0])
            }
            PrimOp::Exp => {
                want(1, "exp")?;
                self.exp(inputs[0])
            }
            PrimOp::Log => {
                want(1, "log")?;
                self.log(inputs[0])
            }
            PrimOp::Mean => {
                want(1, "mean")?;
                self.mean(inputs[0])
            }
            PrimOp::Concat { axis } => self.concat(inputs, axis),
            PrimOp::Slice { axis, start, len } => {
                want(1, "slice")?;
                self.slice(inputs[0], axis, start, len)
            }
            PrimOp::Scale { factor } => {
                want(1, "scale")?;
                self.scale(inputs[0], factor)
            }
        }
    }

    /// (m,k) × (k,n) → (m,n).
    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(NumError::contract(
                "matmul",
                format!("inner dims disagree: {:?} × {:?}", a.shape(), b.shape()),
            ));
        }
        if m == 0 || ka == 0 || n == 0 {
            return Err(NumError::contract("matmul", "zero-sized operand"));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, ka, n, a.data(), false, b.data(), false, &mut out, false);
        let slots = vec![self.slot(a, "matmul")?, self.slot(b, "matmul")?];
        self.push(Op::Matmul, slots, out, vec![m, n], "matmul")
    }

    /// (r,c) → (c,r).
    pub fn transpose(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (r, c) = x.dims2()?;
        let xd = x.data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let slots = vec![self.slot(x, "transpose")?];
        self.push(Op::Transpose, slots, out, vec![c, r], "transpose")
    }

    /// Elementwise addition of equal shapes, or row-broadcast of a bias
    /// vector: (r,c) + (c,).
    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() == b.shape() {
            let out: Vec<F> =
                a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            let slots = vec![self.slot(a, "add")?, self.slot(b, "add")?];
            return self.push(Op::Add { bias: false }, slots, out, a.shape().to_vec(), "add");
        }
        if a.shape().len() == 2 && b.shape().len() == 1 && a.shape()[1] == b.shape()[0] {
            let (r, c) = a.dims2()?;
            let bd = b.data();
            let mut out = Vec::with_capacity(r * c);
            for row in a.data().chunks_exact(c) {
                out.extend(row.iter().zip(bd).map(|(&x, &y)| x + y));
            }
            let slots = vec![self.slot(a, "add")?, self.slot(b, "add")?];
            return self.push(Op::Add { bias: true }, slots, out, vec![r, c], "add");
        }
        Err(NumError::contract(
            "add",
            format!("incompatible shapes {:?} + {:?}", a.shape(), b.shape()),
        ))
    }

    /// Elementwise product, equal shapes only.
    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(NumError::contract(
                "mul",
                format!("incompatible shapes {:?} ⊙ {:?}", a.shape(), b.shape()),
            ));
        }
        let out: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let slots = vec![self.slot(a, "mul")?, self.slot(b, "mul")?];
        self.push(Op::Mul, slots, out, a.shape().to_vec(), "mul")
    }

    pub fn relu(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let out: Vec<F> =
            x.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let slots = vec![self.slot(x, "relu")?];
        self.push(Op::Relu, slots, out, x.shape().to_vec(), "relu")
    }

    pub fn exp(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let out: Vec<F> = x.data().iter().map(|&v| v.exp()).collect();
        let slots = vec![self.slot(x, "exp")?];
        self.push(Op::Exp, slots, out, x.shape().to_vec(), "exp")
    }

    /// Natural log; non-positive inputs surface as a numeric failure.
    pub fn log(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let out: Vec<F> = x.data().iter().map(|&v| v.ln()).collect();
        let slots = vec![self.slot(x, "log")?];
        self.push(Op::Log, slots, out, x.shape().to_vec(), "log")
    }

    /// Mean over every entry, in index order, yielding shape [1].
    pub fn mean(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.is_empty() {
            return Err(NumError::contract("mean", "empty input"));
        }
        let mut acc = F::zero();
        for &v in x.data() {
            acc = acc + v;
        }
        let out = vec![acc / F::from_f64(x.len() as f64)];
        let slots = vec![self.slot(x, "mean")?];
        self.push(Op::Mean, slots, out, vec![1], "mean")
    }

    /// Concatenation along `axis`. 1-D tensors concat along axis 0; 2-D
    /// tensors along axis 0 (equal cols) or axis 1 (equal rows). The same
    /// tensor may appear several times (fan-out accumulates in backward).
    pub fn concat(&mut self, xs: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        if xs.is_empty() {
            return Err(NumError::contract("concat", "no inputs"));
        }
        let rank = xs[0].shape().len();
        if !xs.iter().all(|t| t.shape().len() == rank) {
            return Err(NumError::contract("concat", "mixed ranks"));
        }
        let (out, shape) = match (rank, axis) {
            (1, 0) => {
                let mut out = Vec::new();
                for t in xs {
                    out.extend_from_slice(t.data());
                }
                let n = out.len();
                (out, vec![n])
            }
            (2, 0) => {
                let cols = xs[0].shape()[1];
                if !xs.iter().all(|t| t.shape()[1] == cols) {
                    return Err(NumError::contract("concat", "axis-0 concat needs equal cols"));
                }
                let rows: usize = xs.iter().map(|t| t.shape()[0]).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for t in xs {
                    out.extend_from_slice(t.data());
                }
                (out, vec![rows, cols])
            }
            (2, 1) => {
                let rows = xs[0].shape()[0];
                if !xs.iter().all(|t| t.shape()[0] == rows) {
                    return Err(NumError::contract("concat", "axis-1 concat needs equal rows"));
                }
                let cols: usize = xs.iter().map(|t| t.shape()[1]).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in xs {
                        let w = t.shape()[1];
                        out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                    }
                }
                (out, vec![rows, cols])
            }
            _ => {
                return Err(NumError::contract(
                    "concat",
                    format!("unsupported rank {} / axis {}", rank, axis),
                ))
            }
        };
        let mut slots = Vec::with_capacity(xs.len());
        for t in xs {
            slots.push(self.slot(t, "concat")?);
        }
        self.push(Op::Concat { axis }, slots, out, shape, "concat")
    }

    /// Contiguous slab [start, start+len) along `axis`.
    pub fn slice(
        &mut self,
        x: &Tensor<F>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor<F>> {
        let rank = x.shape().len();
        if len == 0 {
            return Err(NumError::contract("slice", "zero length"));
        }
        let (out, shape) = match (rank, axis) {
            (1, 0) => {
                if start + len > x.shape()[0] {
                    return Err(NumError::contract("slice", "range out of bounds"));
                }
                (x.data()[start..start + len].to_vec(), vec![len])
            }
            (2, 0) => {
                let (r, c) = x.dims2()?;
                if start + len > r {
                    return Err(NumError::contract("slice", "row range out of bounds"));
                }
                (x.data()[start * c..(start + len) * c].to_vec(), vec![len, c])
            }
            (2, 1) => {
                let (r, c) = x.dims2()?;
                if start + len > c {
                    return Err(NumError::contract("slice", "col range out of bounds"));
                }
                let mut out = Vec::with_capacity(r * len);
                for row in x.data().chunks_exact(c) {
                    out.extend_from_slice(&row[start..start + len]);
                }
                (out, vec![r, len])
            }
            _ => {
                return Err(NumError::contract(
                    "slice",
                    format!("unsupported rank {} / axis {}", rank, axis),
                ))
            }
        };
        let slots = vec![self.slot(x, "slice")?];
        self.push(Op::Slice { axis, start, len }, slots, out, shape, "slice")
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&mut self, x: &Tensor<F>, factor: F) -> Result<Tensor<F>> {
        if !factor.is_finite() {
            return Err(NumError::NonFinite { op: "scale" });
        }
        let out: Vec<F> = x.data().iter().map(|&v| v * factor).collect();
        let slots = vec![self.slot(x, "scale")?];
        self.push(Op::Scale { factor }, slots, out, x.shape().to_vec(), "scale")
    }

    // ── Fused operations ─────────────────────────────────────────────────

    /// Mean cross-entropy of row-wise softmax against integer labels.
    /// Rows are max-shifted before exponentiation.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor<F>,
        labels: &[usize],
    ) -> Result<Tensor<F>> {
        let (rows, cols) = logits.dims2()?;
        if labels.len() != rows {
            return Err(NumError::contract(
                "softmax_cross_entropy",
                format!("{} label(s) for {} row(s)", labels.len(), rows),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(NumError::contract(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", bad, cols),
            ));
        }
        let zd = logits.data();
        let mut probs = vec![F::zero(); rows * cols];
        let mut loss_acc = F::zero();
        for (r, row) in zd.chunks_exact(cols).enumerate() {
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * cols + j] = e;
                denom = denom + e;
            }
            for j in 0..cols {
                probs[r * cols + j] = probs[r * cols + j] / denom;
            }
            // -log softmax(row)[y] = ln(sum_j e^{z_j - mx}) - (z_y - mx)
            loss_acc = loss_acc + denom.ln() - (row[labels[r]] - mx);
        }
        let out = vec![loss_acc / F::from_f64(rows as f64)];
        let slots = vec![self.slot(logits, "softmax_cross_entropy")?];
        self.push(
            Op::SoftmaxCrossEntropy {
                labels: Rc::new(labels.to_vec()),
                probs: Rc::new(probs),
            },
            slots,
            out,
            vec![1],
            "softmax_cross_entropy",
        )
    }

    /// Row-wise log-softmax; stays finite for any finite logits.
    pub fn log_softmax_rows(&mut self, logits: &Tensor<F>) -> Result<Tensor<F>> {
        let (rows, cols) = logits.dims2()?;
        let zd = logits.data();
        let mut out = vec![F::zero(); rows * cols];
        for (r, row) in zd.chunks_exact(cols).enumerate() {
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::zero();
            for &v in row {
                denom = denom + (v - mx).exp();
            }
            let lse = mx + denom.ln();
            for j in 0..cols {
                out[r * cols + j] = row[j] - lse;
            }
        }
        let slots = vec![self.slot(logits, "log_softmax_rows")?];
        self.push(Op::LogSoftmaxRows, slots, out, vec![rows, cols], "log_softmax_rows")
    }

    /// Row-wise softmax (each row sums to 1); composed from log-softmax so
    /// the gradient path is shared.
    pub fn softmax_rows(&mut self, logits: &Tensor<F>) -> Result<Tensor<F>> {
        let lsm = self.log_softmax_rows(logits)?;
        self.exp(&lsm)
    }

    /// Closed-form KL(q ‖ p) between diagonal Gaussians, summed over every
    /// entry: Σ ½(e^{lq−lp} + (μp−μq)²·e^{−lp} − 1 + lp − lq).
    pub fn gaussian_kl(
        &mut self,
        q: &GaussianParams<F>,
        p: &GaussianParams<F>,
    ) -> Result<Tensor<F>> {
        if q.mean.shape() != p.mean.shape() {
            return Err(NumError::contract(
                "gaussian_kl",
                format!("q shape {:?} vs p shape {:?}", q.mean.shape(), p.mean.shape()),
            ));
        }
        let (mq, lq, mp, lp) = (q.mean.data(), q.logvar.data(), p.mean.data(), p.logvar.data());
        let half = F::from_f64(0.5);
        let mut acc = F::zero();
        for i in 0..mq.len() {
            let dm = mp[i] - mq[i];
            let term = (lq[i] - lp[i]).exp() + dm * dm * (-lp[i]).exp() - F::one() + lp[i] - lq[i];
            acc = acc + half * term;
        }
        let slots = vec![
            self.slot(&q.mean, "gaussian_kl")?,
            self.slot(&q.logvar, "gaussian_kl")?,
            self.slot(&p.mean, "gaussian_kl")?,
            self.slot(&p.logvar, "gaussian_kl")?,
        ];
        self.push(Op::GaussianKl, slots, vec![acc], vec![1], "gaussian_kl")
    }

    /// Draw mean + exp(logvar/2) ⊙ ε with ε ~ N(0, I) from `rng`. Gradients
    /// flow to both mean and logvar; ε is stored on the node.
    pub fn reparameterize(
        &mut self,
        g: &GaussianParams<F>,
        rng: &mut impl rand::Rng,
    ) -> Result<Tensor<F>> {
        let n = g.mean.len();
        let mut eps = Vec::with_capacity(n);
        for _ in 0..n {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            eps.push(F::from_f64(e));
        }
        let half = F::from_f64(0.5);
        let (m, lv) = (g.mean.data(), g.logvar.data());
        let out: Vec<F> =
            (0..n).map(|i| m[i] + (lv[i] * half).exp() * eps[i]).collect();
        let slots = vec![self.slot(&g.mean, "reparameterize")?, self.slot(&g.logvar, "reparameterize")?];
        self.push(
            Op::Reparam { eps: Rc::new(eps) },
            slots,
            out,
            g.mean.shape().to_vec(),
            "reparameterize",
        )
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits each node at most once and
    /// accumulates fan-out contributions in fixed index order, so results
    /// are reproducible bit for bit.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<Gradients<F>> {
        let nr = loss.node.ok_or_else(|| {
            NumError::contract("backward", "loss is not tracked on this tape")
        })?;
        if nr.epoch != self.epoch {
            return Err(NumError::contract("backward", "loss from a different tape generation"));
        }
        if !loss.is_scalar() {
            return Err(NumError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[nr.id] = Some(vec![F::one()]);

        for id in (0..=nr.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            self.vjp(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        for g in grads.iter().flatten() {
            if !all_finite(g) {
                return Err(NumError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { epoch: self.epoch, grads })
    }

    fn vjp(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        // Ensures the input's gradient buffer exists, then applies `f`.
        fn with_acc<F: Scalar>(
            slot: &InputSlot<F>,
            grads: &mut [Option<Vec<F>>],
            f: impl FnOnce(&mut [F]),
        ) {
            if let Some(id) = slot.node {
                let buf = grads[id]
                    .get_or_insert_with(|| vec![F::zero(); slot.data.len()]);
                f(buf);
            }
        }

        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (m, k) = (ins[0].shape[0], ins[0].shape[1]);
                let n = ins[1].shape[1];
                with_acc(&ins[0], grads, |ga| {
                    gemm(m, n, k, g, false, &ins[1].data, true, ga, true);
                });
                with_acc(&ins[1], grads, |gb| {
                    gemm(k, m, n, &ins[0].data, true, g, false, gb, true);
                });
            }
            Op::Transpose => {
                let (r, c) = (ins[0].shape[0], ins[0].shape[1]);
                with_acc(&ins[0], grads, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { bias } => {
                with_acc(&ins[0], grads, |ga| {
                    for (a, &b) in ga.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                });
                if *bias {
                    let c = ins[1].shape[0];
                    with_acc(&ins[1], grads, |gb| {
                        for row in g.chunks_exact(c) {
                            for (a, &b) in gb.iter_mut().zip(row) {
                                *a = *a + b;
                            }
                        }
                    });
                } else {
                    with_acc(&ins[1], grads, |gb| {
                        for (a, &b) in gb.iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    });
                }
            }
            Op::Mul => {
                with_acc(&ins[0], grads, |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * ins[1].data[i];
                    }
                });
                with_acc(&ins[1], grads, |gb| {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * ins[0].data[i];
                    }
                });
            }
            Op::Relu => {
                with_acc(&ins[0], grads, |gx| {
                    for i in 0..g.len() {
                        if ins[0].data[i] > F::zero() {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                });
            }
            Op::Exp => {
                let out = &node.out;
                with_acc(&ins[0], grads, |gx| {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * out[i];
                    }
                });
            }
            Op::Log => {
                with_acc(&ins[0], grads, |gx| {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] / ins[0].data[i];
                    }
                });
            }
            Op::Mean => {
                let n = F::from_f64(ins[0].data.len() as f64);
                let gv = g[0] / n;
                with_acc(&ins[0], grads, |gx| {
                    for a in gx.iter_mut() {
                        *a = *a + gv;
                    }
                });
            }
            Op::Concat { axis } => {
                let rank = ins[0].shape.len();
                match (rank, axis) {
                    (1, 0) | (2, 0) => {
                        let mut off = 0;
                        for slot in ins {
                            let n = slot.data.len();
                            with_acc(slot, grads, |gx| {
                                for i in 0..n {
                                    gx[i] = gx[i] + g[off + i];
                                }
                            });
                            off += n;
                        }
                    }
                    (2, 1) => {
                        let rows = ins[0].shape[0];
                        let total_cols: usize = ins.iter().map(|s| s.shape[1]).sum();
                        let mut off = 0;
                        for slot in ins {
                            let w = slot.shape[1];
                            with_acc(slot, grads, |gx| {
                                for r in 0..rows {
                                    for j in 0..w {
                                        gx[r * w + j] =
                                            gx[r * w + j] + g[r * total_cols + off + j];
                                    }
                                }
                            });
                            off += w;
                        }
                    }
                    _ => unreachable!("concat axis validated at forward"),
                }
            }
            Op::Slice { axis, start, len } => {
                let rank = ins[0].shape.len();
                match (rank, axis) {
                    (1, 0) => {
                        with_acc(&ins[0], grads, |gx| {
                            for i in 0..*len {
                                gx[start + i] = gx[start + i] + g[i];
                            }
                        });
                    }
                    (2, 0) => {
                        let c = ins[0].shape[1];
                        with_acc(&ins[0], grads, |gx| {
                            for i in 0..len * c {
                                gx[start * c + i] = gx[start * c + i] + g[i];
                            }
                        });
                    }
                    (2, 1) => {
                        let (r, c) = (ins[0].shape[0], ins[0].shape[1]);
                        with_acc(&ins[0], grads, |gx| {
                            for i in 0..r {
                                for j in 0..*len {
                                    gx[i * c + start + j] =
                                        gx[i * c + start + j] + g[i * len + j];
                                }
                            }
                        });
                    }
                    _ => unreachable!("slice axis validated at forward"),
                }
            }
            Op::Scale { factor } => {
                let f = *factor;
                with_acc(&ins[0], grads, |gx| {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * f;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let cols = ins[0].shape[1];
                let rows = ins[0].shape[0];
                let inv_rows = F::from_f64(1.0 / rows as f64);
                let gs = g[0];
                with_acc(&ins[0], grads, |gz| {
                    for r in 0..rows {
                        for j in 0..cols {
                            let mut v = probs[r * cols + j];
                            if labels[r] == j {
                                v = v - F::one();
                            }
                            gz[r * cols + j] = gz[r * cols + j] + gs * inv_rows * v;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows => {
                let cols = ins[0].shape[1];
                let out = &node.out;
                with_acc(&ins[0], grads, |gz| {
                    for (r, grow) in g.chunks_exact(cols).enumerate() {
                        let mut gsum = F::zero();
                        for &v in grow {
                            gsum = gsum + v;
                        }
                        for j in 0..cols {
                            let p = out[r * cols + j].exp();
                            gz[r * cols + j] = gz[r * cols + j] + grow[j] - p * gsum;
                        }
                    }
                });
            }
            Op::GaussianKl => {
                let (mq, lq, mp, lp) =
                    (&ins[0].data, &ins[1].data, &ins[2].data, &ins[3].data);
                let half = F::from_f64(0.5);
                let gs = g[0];
                with_acc(&ins[0], grads, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + gs * (mq[i] - mp[i]) * (-lp[i]).exp();
                    }
                });
                with_acc(&ins[1], grads, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + gs * half * ((lq[i] - lp[i]).exp() - F::one());
                    }
                });
                with_acc(&ins[2], grads, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + gs * (mp[i] - mq[i]) * (-lp[i]).exp();
                    }
                });
                with_acc(&ins[3], grads, |gx| {
                    for i in 0..gx.len() {
                        let dm = mp[i] - mq[i];
                        let d = -(lq[i] - lp[i]).exp() - dm * dm * (-lp[i]).exp() + F::one();
                        gx[i] = gx[i] + gs * half * d;
                    }
                });
            }
            Op::Reparam { eps } => {
                let lv = &ins[1].data;
                let half = F::from_f64(0.5);
                with_acc(&ins[0], grads, |gm| {
                    for i in 0..g.len() {
                        gm[i] = gm[i] + g[i];
                    }
                });
                with_acc(&ins[1], grads, |gl| {
                    for i in 0..g.len() {
                        gl[i] = gl[i] + g[i] * half * (lv[i] * half).exp() * eps[i];
                    }
                });
            }
        }
        Ok(())
    }
}
