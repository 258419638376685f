use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Log-variance clamp range shared by every Gaussian head. Keeps variances
/// inside [e^-10, e^10] so KL terms and reparameterized draws stay finite.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Diagonal Gaussian over a (rows, dim) block of values: one mean and one
/// log-variance per entry. Rows are class indices for classifier
/// distributions.
#[derive(Clone, Debug)]
pub struct GaussianParams<F: Scalar> {
    pub mean: Tensor<F>,
    pub logvar: Tensor<F>,
}

impl<F: Scalar> GaussianParams<F> {
    pub fn new(mean: Tensor<F>, logvar: Tensor<F>) -> Result<Self> {
        if mean.shape() != logvar.shape() {
            return Err(NumError::contract(
                "gaussian_params",
                format!("mean shape {:?} vs logvar shape {:?}", mean.shape(), logvar.shape()),
            ));
        }
        Ok(GaussianParams { mean, logvar })
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    /// Row `r` of a 2-D Gaussian block as a (1, dim) Gaussian.
    pub fn row(&self, tape: &mut Tape<F>, r: usize) -> Result<GaussianParams<F>> {
        let m = tape.slice(&self.mean, 0, r, 1)?;
        let lv = tape.slice(&self.logvar, 0, r, 1)?;
        GaussianParams::new(m, lv)
    }
}

impl<F: Scalar> Tape<F> {
    /// Hard clamp to [lo, hi], composed from the primitive set:
    /// max(x, lo) = lo + relu(x − lo), min(y, hi) = hi − relu(hi − y).
    /// The gradient passes through inside the range and is zero outside.
    pub fn clamp(&mut self, x: &Tensor<F>, lo: F, hi: F) -> Result<Tensor<F>> {
        assert!(lo < hi, "clamp range [{}, {}] is empty", lo, hi);
        let lo_t = Tensor::filled(lo, x.shape());
        let hi_t = Tensor::filled(hi, x.shape());
        let neg_lo = self.scale(&lo_t, -F::one())?;
        let shifted = self.add(x, &neg_lo)?;
        let above = self.relu(&shifted)?;
        let floor = self.add(&above, &lo_t)?;
        let neg_floor = self.scale(&floor, -F::one())?;
        let gap = self.add(&hi_t, &neg_floor)?;
        let over = self.relu(&gap)?;
        let neg_over = self.scale(&over, -F::one())?;
        self.add(&hi_t, &neg_over)
    }

    /// Splits a head output (rows, 2·dim) into a Gaussian with the first
    /// `dim` columns as means and the rest as clamped log-variances.
    pub fn split_gaussian(&mut self, head_out: &Tensor<F>) -> Result<GaussianParams<F>> {
        let (_, cols) = head_out.dims2()?;
        if cols % 2 != 0 {
            return Err(NumError::contract(
                "split_gaussian",
                format!("odd column count {}", cols),
            ));
        }
        let dim = cols / 2;
        let mean = self.slice(head_out, 1, 0, dim)?;
        let raw_lv = self.slice(head_out, 1, dim, dim)?;
        let logvar =
            self.clamp(&raw_lv, F::from_f64(LOGVAR_MIN), F::from_f64(LOGVAR_MAX))?;
        GaussianParams::new(mean, logvar)
    }
}
