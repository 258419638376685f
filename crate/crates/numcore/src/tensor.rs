use std::rc::Rc;

use crate::error::{NumError, Result};
use crate::scalar::Scalar;

/// Handle tying a tensor to a node of a specific tape generation. A handle
/// from a cleared or foreign tape is rejected by the ops rather than being
/// silently treated as a constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub epoch: u64,
    pub id: usize,
}

/// Immutable dense tensor: flat row-major data plus a shape. Cloning is
/// cheap (the buffer is shared). A tensor either floats free as a constant
/// or is tracked by the tape that produced it (`requires_grad`).
#[derive(Clone, Debug)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<F>>,
    pub(crate) node: Option<NodeRef>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a constant tensor, validating shape/length agreement and
    /// rejecting non-finite entries.
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumError::contract(
                "tensor",
                format!("shape {:?} wants {} entries, got {}", shape, n, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None })
    }

    /// Scalar constant with shape `[1]`.
    pub fn scalar(x: F) -> Self {
        Tensor { shape: vec![1], data: Rc::new(vec![x]), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![F::zero(); n]), node: None }
    }

    pub fn filled(x: F, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![x; n]), node: None }
    }

    pub(crate) fn tracked(data: Rc<Vec<F>>, shape: Vec<usize>, node: NodeRef) -> Self {
        Tensor { shape, data, node: Some(node) }
    }

    pub(crate) fn untracked(data: Rc<Vec<F>>, shape: Vec<usize>) -> Self {
        Tensor { shape, data, node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<F>> {
        Rc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when this tensor is attached to a tape node and will receive a
    /// gradient from `backward`.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(NumError::contract("tensor", format!("expected 2-D, got {:?}", self.shape)))
        }
    }
}

/// Mutable parameter storage owned by a model. Each training step registers
/// parameters on a fresh tape as leaves; `adam_step` updates the raw data
/// in place between steps.
#[derive(Clone, Debug)]
pub struct Parameter<F: Scalar> {
    pub data: Vec<F>,
    pub shape: Vec<usize>,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumError::contract(
                "parameter",
                format!("shape {:?} wants {} entries, got {}", shape, n, data.len()),
            ));
        }
        Ok(Parameter { data, shape: shape.to_vec() })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Parameter { data: vec![F::zero(); n], shape: shape.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Untracked tensor view of the current values.
    pub fn value(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::new(self.data.clone()),
            node: None,
        }
    }
}
