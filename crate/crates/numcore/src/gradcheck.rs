use crate::error::{NumError, Result};
use crate::tape::Tape;
use crate::tensor::{Parameter, Tensor};

/// Outcome of a finite-difference sweep: the largest relative deviation and
/// where it occurred.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, entry by entry, in f64.
///
/// `f` receives a tape plus one tensor per parameter (leaves when the tape
/// records, constants otherwise) and must rebuild the same computation on
/// every call; any internal randomness has to be re-derived from fixed
/// seeds so perturbed evaluations see identical noise.
///
/// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
pub fn gradient_check<Fx>(
    f: Fx,
    params: &[Parameter<f64>],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    Fx: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if epsilon <= 0.0 {
        return Err(NumError::contract("gradient_check", "epsilon must be positive"));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let leaves: Vec<Tensor<f64>> =
        params.iter().map(|p| tape.leaf(p)).collect::<Result<_>>()?;
    let loss = f(&mut tape, &leaves)?;
    if !loss.is_scalar() {
        return Err(NumError::contract("gradient_check", "function must return a scalar"));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| grads.wrt_dense(l)).collect();

    // Numeric pass: evaluate with recording disabled and one entry nudged.
    let eval = |ps: &[Parameter<f64>]| -> Result<f64> {
        let mut t = Tape::eval_only();
        let consts: Vec<Tensor<f64>> =
            ps.iter().map(|p| t.leaf(p)).collect::<Result<_>>()?;
        Ok(f(&mut t, &consts)?.item())
    };

    let mut work: Vec<Parameter<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].data[ei] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].data[ei] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst_param: pi,
                    worst_entry: ei,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
