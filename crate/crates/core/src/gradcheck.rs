//! Finite-difference checks of parameter gradients.

use prn_tensor::{Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::nn::{Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-5;

/// Compares analytic gradients of `<r, f(params)>` against central
/// differences for up to `per_param` random entries of every trainable
/// parameter, where `r` is a fixed random projection of the output. `f` runs
/// in training mode.
pub fn param_gradient_error(
    store: &ParamStore<f64>,
    per_param: usize,
    seed: u64,
    f: impl Fn(&mut Ctx<'_, f64>) -> Var,
) -> GradCheckReport {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = Ctx::new(store, true);
    let root = f(&mut ctx);
    let proj = Tensor::from_fn(ctx.tape.shape(root), |_| rng.random_range(-1.0..1.0));
    let mut grads = ctx.tape.backward_from(root, proj.clone());
    let analytic = ctx.param_grads(&mut grads);
    let value = |s: &ParamStore<f64>| {
        let mut c = Ctx::new(s, true);
        let out = f(&mut c);
        c.tape.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    let mut probe = store.clone();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let len = store.get(id).len();
        let g = analytic.iter().find(|(p, _)| *p == id).map(|(_, g)| g.clone()).unwrap_or_else(|| Tensor::zeros(&[len]));
        for i in sample(&mut rng, len, per_param.min(len)) {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + STEP;
            let up = value(&probe);
            probe.get_mut(id).data_mut()[i] = orig - STEP;
            let down = value(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    report
}
