//! Central finite-difference checking for any scalar-valued tape program.
//!
//! Gradient checks run at f64: the `1e-5` step loses too many bits at f32 to
//! separate a wrong gradient from round-off.

use super::{Tape, Tensor, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default relative-error bound.
pub const DEFAULT_TOL: f64 = 1e-4;

/// One finite-difference failure, for diagnostics.
#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} element {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            self.input, self.element, self.analytic, self.numeric, self.rel_err
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Checks the tape gradient of `program` against central finite differences
/// over every element of every input. `program` must build a scalar from
/// leaves created in the given order.
pub fn check<F>(
    program: F,
    inputs: &[Tensor<f64>],
    step: f64,
    tol: f64,
) -> Result<(), GradMismatch>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Var<'a, f64>,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        program(&tape, &vars).scalar_value()
    };

    // Analytic gradients in one pass.
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = program(&tape, &vars);
    let grads = tape.backward(root).expect("program must build a scalar");

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + step;
            let up = eval(&work);
            work[i].data_mut()[e] = orig - step;
            let down = eval(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[e];
            let err = rel_err(a, numeric);
            if err >= tol {
                return Err(GradMismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(())
}

/// [`check`] with the default step and tolerance, panicking with context on
/// failure. The workhorse of the gradient suites.
pub fn assert_grads<F>(name: &str, program: F, inputs: &[Tensor<f64>])
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Var<'a, f64>,
{
    if let Err(m) = check(program, inputs, DEFAULT_STEP, DEFAULT_TOL) {
        panic!("gradient check failed for {name}: {m}");
    }
}
