//! Central-difference gradient checking for scalar-valued tensor functions.

use super::{Tape, Tensor, TensorId};
use rand::Rng;
use rand::SeedableRng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// (input index, element index) of the worst deviation.
    pub worst: (usize, usize),
}

/// Compare analytic gradients of `f` against central differences with step `h`.
///
/// `f` must deterministically build a scalar loss from leaves created in
/// order from `inputs`. The numeric side re-evaluates `f` on perturbed
/// copies, so it never touches the analytic backward path it is checking.
/// Relative error uses `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(pi, t)| (0..t.numel()).map(move |ei| (pi, ei)))
        .collect();
    grad_check_coords(f, inputs, h, tol, &coords)
}

/// [`grad_check`] restricted to `samples` random coordinates; for composite
/// graphs where a full sweep would be too slow.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let coords: Vec<(usize, usize)> = (0..samples)
        .map(|_| {
            let pi = rng.gen_range(0..inputs.len());
            let ei = rng.gen_range(0..inputs[pi].numel());
            (pi, ei)
        })
        .collect();
    grad_check_coords(f, inputs, h, tol, &coords)
}

fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    coords: &[(usize, usize)],
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> =
            inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let loss = f(&mut tape, &ids);
        tape.backward(loss).expect("grad_check: backward failed");
        ids.iter()
            .map(|&id| tape.grad(id).expect("leaf gradient missing").to_vec())
            .collect()
    };

    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut worst = (0, 0);
    for &(pi, ei) in coords {
        let mut plus = inputs.to_vec();
        plus[pi].data[ei] += h;
        let mut minus = inputs.to_vec();
        minus[pi].data[ei] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic[pi][ei];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = (pi, ei);
        }
    }
    GradCheckReport { max_rel_err, pass: max_rel_err <= tol, worst }
}
