//! Shared test oracles, independent of the implementation paths they check.

use vla_core::numerics::{Graph, NodeId, Tensor};

/// Central finite-difference gradient of `build` with respect to every
/// element of every input in `inputs`, evaluated in f64.
///
/// `build` must construct a scalar output from freshly inserted leaves.
/// Inputs listed in `perturb` get checked; the rest stay constant.
pub fn fd_gradients(
    inputs: &[Vec<f64>],
    shapes: &[Vec<usize>],
    perturb: &[bool],
    step: f64,
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> Vec<Vec<f64>> {
    let eval = |data: &[Vec<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = data
            .iter()
            .zip(shapes.iter())
            .map(|(d, s)| g.constant(Tensor::from_vec(s.clone(), d.clone()).unwrap()))
            .collect();
        let out = build(&mut g, &ids);
        g.scalar_value(out)
    };
    let mut grads: Vec<Vec<f64>> = inputs.iter().map(|v| vec![0.0; v.len()]).collect();
    for (ti, input) in inputs.iter().enumerate() {
        if !perturb[ti] {
            continue;
        }
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ti][ei] += step;
            let mut minus = inputs.to_vec();
            minus[ti][ei] -= step;
            grads[ti][ei] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
    }
    grads
}

/// Reverse-mode gradients for the same construction.
pub fn ad_gradients(
    inputs: &[Vec<f64>],
    shapes: &[Vec<usize>],
    perturb: &[bool],
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> Vec<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .zip(shapes.iter())
        .zip(perturb.iter())
        .map(|((d, s), &p)| {
            let t = Tensor::from_vec(s.clone(), d.clone()).unwrap();
            if p {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
        .collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out).unwrap();
    ids.iter()
        .zip(inputs.iter())
        .zip(perturb.iter())
        .map(|((id, input), &p)| {
            if p {
                grads
                    .get(*id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; input.len()])
            } else {
                vec![0.0; input.len()]
            }
        })
        .collect()
}

/// max over elements of |a - b| / max(1, |b|).
pub fn max_rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (va, vb) in a.iter().zip(b.iter()) {
        for (&x, &y) in va.iter().zip(vb.iter()) {
            let denom = y.abs().max(1.0);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
