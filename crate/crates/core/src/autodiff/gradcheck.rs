//! Finite-difference gradient checking.
//!
//! The checker runs a differentiable program twice: once with a tape to get
//! reverse-mode gradients, and once per perturbed parameter element to form
//! central differences. Everything here runs at f64.

use super::params::ParameterSet;
use super::tape::{backward, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative-error comparison. Central differences
/// at step 1e-5 on a loss of magnitude ~10 carry ~1e-8 of f64 rounding
/// noise, so gradients far below this floor are compared absolutely (at an
/// effective 1e-7) instead of having that noise inflated into spurious
/// relative errors.
const REL_FLOOR: f64 = 1e-3;

/// A differentiable program: forward pass from (parameters, input) to a
/// scalar loss, recording on the tape when one is given.
pub trait Program {
    fn run(
        &self,
        params: &mut ParameterSet<f64>,
        input: &Tensor<f64>,
        tape: Option<&mut Tape<f64>>,
    ) -> Result<Tensor<f64>>;
}

impl<T> Program for T
where
    T: Fn(&mut ParameterSet<f64>, &Tensor<f64>, Option<&mut Tape<f64>>) -> Result<Tensor<f64>>,
{
    fn run(
        &self,
        params: &mut ParameterSet<f64>,
        input: &Tensor<f64>,
        tape: Option<&mut Tape<f64>>,
    ) -> Result<Tensor<f64>> {
        self(params, input, tape)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter with the largest relative error (the offender on failure).
    pub worst_parameter: Option<String>,
    pub num_elements_checked: usize,
    pub pass: bool,
}

/// Compare reverse-mode gradients against central finite differences for
/// every grad-enabled parameter. Passes iff the max relative error stays
/// below `tolerance`.
pub fn grad_check<P: Program>(
    program: &P,
    params: &ParameterSet<f64>,
    input: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    let mut tape = Tape::new();
    let loss = program.run(&mut work, input, Some(&mut tape))?;
    let ad = backward(&tape, &loss)?;
    let fd = finite_difference_grads(program, params, input)?;
    Ok(compare_grads(&ad, &fd, tolerance))
}

fn eval_loss<P: Program>(
    program: &P,
    params: &ParameterSet<f64>,
    input: &Tensor<f64>,
) -> Result<f64> {
    let mut work = params.clone();
    let loss = program.run(&mut work, input, None)?;
    loss.item().map(|v| v as f64).map_err(|_| Error::Tape("program loss must be scalar".into()))
}

/// Central differences for every grad-enabled parameter element.
pub fn finite_difference_grads<P: Program>(
    program: &P,
    params: &ParameterSet<f64>,
    input: &Tensor<f64>,
) -> Result<ParameterSet<f64>> {
    let mut out = ParameterSet::new();
    let names: Vec<String> =
        params.iter().filter(|(_, t)| t.grad_enabled()).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let len = params.get(&name).expect("listed name").len();
        let shape = params.get(&name).expect("listed name").shape().to_vec();
        let mut grad = vec![0.0f64; len];
        for i in 0..len {
            let mut plus = params.clone();
            plus.get_mut(&name).expect("param").data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(&name).expect("param").data_mut()[i] -= FD_STEP;
            let lp = eval_loss(program, &plus, input)?;
            let lm = eval_loss(program, &minus, input)?;
            grad[i] = (lp - lm) / (2.0 * FD_STEP);
        }
        out.set(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

/// Elementwise relative comparison of two gradient sets sharing names.
pub fn compare_grads(
    ad: &ParameterSet<f64>,
    fd: &ParameterSet<f64>,
    tolerance: f64,
) -> GradCheckReport {
    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    for (name, fd_grad) in fd.iter() {
        let ad_grad = match ad.get(name) {
            Some(g) => g,
            None => continue,
        };
        for (&a, &b) in ad_grad.data().iter().zip(fd_grad.data()) {
            let err = (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR);
            checked += 1;
            if err > max_err {
                max_err = err;
                worst = Some(name.to_string());
            }
        }
    }
    GradCheckReport {
        max_relative_error: max_err,
        worst_parameter: worst,
        num_elements_checked: checked,
        pass: max_err < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::layers::{LayerSpec, Mode};
    use crate::autodiff::tape::apply_layer;
    use crate::rng::StreamKey;

    fn random_tensor(shape: Vec<usize>, key: StreamKey, scale: f64) -> Tensor<f64> {
        let mut rng = key.stream();
        let n = shape.iter().product();
        let data = (0..n).map(|_| crate::rng::standard_normal(&mut rng) * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Two-layer MLP: dense -> relu -> dense -> l2_normalize -> sum of first
    /// component. Checks the composed backward path against differences.
    fn mlp_program(
        params: &mut ParameterSet<f64>,
        input: &Tensor<f64>,
        mut tape: Option<&mut Tape<f64>>,
    ) -> Result<Tensor<f64>> {
        let h = apply_layer(&LayerSpec::Dense, input, params, "fc1", Mode::Train, tape.as_deref_mut())?;
        let h = apply_layer(&LayerSpec::Relu, &h, params, "", Mode::Train, tape.as_deref_mut())?;
        let h = apply_layer(&LayerSpec::Dense, &h, params, "fc2", Mode::Train, tape.as_deref_mut())?;
        let z = apply_layer(&LayerSpec::L2Normalize, &h, params, "", Mode::Train, tape.as_deref_mut())?;
        // Weighted sum as the scalar head; gradient of the head is the
        // weight pattern itself.
        let rows = z.shape()[0];
        let d = z.shape()[1];
        let mut loss = 0.0;
        let mut grad = Tensor::zeros(vec![rows, d]);
        for r in 0..rows {
            for c in 0..d {
                let w = ((r + 2 * c) % 5) as f64 * 0.25 - 0.5;
                loss += w * z.data()[r * d + c];
                grad.data_mut()[r * d + c] = w;
            }
        }
        match tape {
            Some(t) => t.record_scalar_loss(&z, loss, grad),
            None => Ok(Tensor::scalar(loss)),
        }
    }

    fn mlp_params(key: StreamKey) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.set("fc1.weight", random_tensor(vec![8, 6], key.child(0), 0.7).with_grad(true));
        p.set("fc1.bias", random_tensor(vec![6], key.child(1), 0.3).with_grad(true));
        p.set("fc2.weight", random_tensor(vec![6, 4], key.child(2), 0.7).with_grad(true));
        p.set("fc2.bias", random_tensor(vec![4], key.child(3), 0.3).with_grad(true));
        p
    }

    #[test]
    fn two_layer_mlp_passes_grad_check() {
        let key = StreamKey::from_seed(11);
        let params = mlp_params(key);
        let input = random_tensor(vec![3, 8], key.child(9), 1.0);
        let report = grad_check(&mlp_program, &params, &input, 1e-4).unwrap();
        assert!(report.pass, "max rel err {}", report.max_relative_error);
        assert!(report.num_elements_checked > 0);
    }

    #[test]
    fn frozen_parameter_is_excluded_and_check_passes() {
        let key = StreamKey::from_seed(12);
        let mut params = mlp_params(key);
        params.get_mut("fc1.bias").unwrap().set_grad_enabled(false);
        let input = random_tensor(vec![2, 8], key.child(9), 1.0);
        let report = grad_check(&mlp_program, &params, &input, 1e-4).unwrap();
        assert!(report.pass);
        // 8*6 + 6*4 + 4 = 76 elements once the frozen bias is excluded.
        assert_eq!(report.num_elements_checked, 76);
    }

    /// Negative control: corrupt one reverse-mode gradient and confirm the
    /// comparison fails naming the offending parameter.
    #[test]
    fn corrupted_backward_rule_fails_with_named_parameter() {
        let key = StreamKey::from_seed(13);
        let params = mlp_params(key);
        let input = random_tensor(vec![3, 8], key.child(9), 1.0);

        let mut work = params.clone();
        let mut tape = Tape::new();
        let loss = mlp_program(&mut work, &input, Some(&mut tape)).unwrap();
        let mut ad = backward(&tape, &loss).unwrap();
        for v in ad.get_mut("fc2.weight").unwrap().data_mut() {
            *v *= 1.5; // wrong scale, as if the backward rule were broken
        }
        let fd = finite_difference_grads(&mlp_program, &params, &input).unwrap();
        let report = compare_grads(&ad, &fd, 1e-4);
        assert!(!report.pass);
        assert_eq!(report.worst_parameter.as_deref(), Some("fc2.weight"));
    }
}
