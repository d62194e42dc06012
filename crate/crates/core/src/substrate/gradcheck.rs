//! Central finite-difference gradient estimation, used as an independent
//! check on the tape's reverse pass.

use std::collections::BTreeMap;

use crate::substrate::optim::ParamSet;
use crate::substrate::tensor::Tensor;

/// Central differences over every entry of every parameter in `set`.
///
/// `f` must be a pure function of the parameter values.
pub fn finite_diff_grads(
    set: &ParamSet,
    eps: f64,
    f: impl Fn(&ParamSet) -> f64,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let names: Vec<String> = set.names().cloned().collect();
    for name in names {
        let shape = set.get(&name).shape.clone();
        let n = set.get(&name).len();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let mut plus = set.clone();
            plus.get_mut(&name).data[i] += eps;
            let mut minus = set.clone();
            minus.get_mut(&name).data[i] -= eps;
            grad[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out.insert(name, Tensor::new(shape, grad));
    }
    out
}

/// Largest relative error between two gradient maps.
///
/// Denominator is clamped below so near-zero entries compare absolutely.
pub fn max_rel_err(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ga) in a {
        let gb = &b[name];
        for (x, y) in ga.data.iter().zip(&gb.data) {
            let denom = x.abs().max(y.abs()).max(1e-3);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
