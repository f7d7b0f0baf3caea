//! Central finite differences, used as an independent check on
//! [`Graph::backward`](crate::Graph::backward).

use crate::tensor::Tensor;

/// Numerical gradient of `f` with respect to every entry of every input.
pub fn gradient<F>(f: F, inputs: &[Tensor], step: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut out = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; input.len()];
        for (idx, slot) in grad.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                let mut data = input.to_vec();
                data[idx] += delta;
                shifted[k] = Tensor::new(input.shape(), data).expect("same shape");
                f(&shifted)
            };
            *slot = (eval(step) - eval(-step)) / (2.0 * step);
        }
        out.push(Tensor::new(input.shape(), grad).expect("same shape"));
    }
    out
}

/// Largest entrywise relative error, with `floor` guarding near-zero
/// magnitudes: `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
