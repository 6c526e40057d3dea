//! Central finite differences, the independent oracle for every gradient
//! produced by the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::params::{Module, ParamId};
use crate::tensor::Tensor;
use crate::Result;

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        out.push(central_difference(&mut f, &mut probe, i, eps));
    }
    Tensor::new(x.shape(), out).expect("same shape as x")
}

fn central_difference(f: &mut impl FnMut(&Tensor) -> f64, probe: &mut Tensor, i: usize, eps: f64) -> f64 {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + eps;
    let plus = f(probe);
    probe.data_mut()[i] = orig - eps;
    let minus = f(probe);
    probe.data_mut()[i] = orig;
    (plus - minus) / (2.0 * eps)
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    fn push(&mut self, name: String, checked: usize, err: f64) {
        self.max_rel_error = self.max_rel_error.max(err);
        self.entries.push(GradCheckEntry {
            name,
            checked,
            max_rel_error: err,
        });
    }
}

/// Compares tape gradients with central differences for every parameter of
/// `module` and for `input`.
///
/// `loss` builds a scalar from the module and an input leaf on the given
/// tape. With `per_tensor = Some(n)` at most `n` randomly chosen coordinates
/// of each tensor are perturbed; `None` checks every coordinate.
pub fn check_module<M, F>(
    module: &mut M,
    input: &Tensor,
    loss: F,
    eps: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    M: Module,
    F: Fn(&M, &mut Tape, &crate::Var) -> Result<crate::Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let out = loss(module, &mut tape, &x)?;
    let grads = tape.backward(&out)?;
    let input_grad = grads.wrt(&x).expect("input is a leaf");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: usize| -> Vec<usize> {
        match per_tensor {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };

    let eval = |m: &M, inp: &Tensor| -> f64 {
        let mut t = Tape::no_grad();
        let xv = crate::Var::constant(inp.clone());
        loss(m, &mut t, &xv).map(|v| v.value().item()).unwrap_or(f64::NAN)
    };

    let mut report = GradCheckReport {
        entries: Vec::new(),
        max_rel_error: 0.0,
    };

    let mut targets: Vec<(String, ParamId, usize)> = Vec::new();
    module.visit("", &mut |name, p| targets.push((name.to_string(), p.id(), p.numel())));
    for (name, id, numel) in targets {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(&[numel]));
        let coords = pick(numel);
        let mut err = 0.0f64;
        for &i in &coords {
            let orig = param_value(module, id, i);
            set_param_value(module, id, i, orig + eps);
            let plus = eval(module, input);
            set_param_value(module, id, i, orig - eps);
            let minus = eval(module, input);
            set_param_value(module, id, i, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            err = err.max(rel_error(analytic.data()[i], numeric));
        }
        report.push(name, coords.len(), err);
    }

    let coords = pick(input.numel());
    let mut probe = input.clone();
    let mut err = 0.0f64;
    for &i in &coords {
        let numeric = central_difference(&mut |t: &Tensor| eval(module, t), &mut probe, i, eps);
        err = err.max(rel_error(input_grad.data()[i], numeric));
    }
    report.push("input".into(), coords.len(), err);
    Ok(report)
}

fn param_value<M: Module>(module: &M, id: ParamId, i: usize) -> f64 {
    let mut v = f64::NAN;
    module.visit("", &mut |_, p| {
        if p.id() == id {
            v = p.value.data()[i];
        }
    });
    v
}

fn set_param_value<M: Module>(module: &mut M, id: ParamId, i: usize, value: f64) {
    module.visit_mut("", &mut |_, p| {
        if p.id() == id {
            p.value.data_mut()[i] = value;
        }
    });
}
