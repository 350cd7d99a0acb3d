use super::{GradBundle, LayerParams, NnError};
use crate::tensor::Tensor;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Maximum relative error between analytic gradients and central differences
/// for the loss `sum(layer(input))`, over every parameter and input entry.
pub fn grad_check(layer: &LayerParams, input: &Tensor, epsilon: f64) -> Result<f64, NnError> {
    grad_check_with(layer, input, epsilon, |_| {})
}

/// As [`grad_check`], but lets the caller alter the analytic gradients before
/// comparison (used to confirm the checker catches faults).
pub fn grad_check_with(
    layer: &LayerParams,
    input: &Tensor,
    epsilon: f64,
    tamper: impl FnOnce(&mut GradBundle),
) -> Result<f64, NnError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let (out, cache) = layer.forward(input)?;
    let ones = Tensor::filled(out.dims(), 1.0);
    let mut analytic = layer.backward(&cache, &ones)?;
    tamper(&mut analytic);

    let loss = |l: &LayerParams, x: &Tensor| -> Result<f64, NnError> {
        Ok(l.forward(x)?.0.values().iter().sum())
    };

    let mut worst = 0.0_f64;
    let mut probe = layer.clone();
    let tensor_count = probe.named_tensors().len();
    for ti in 0..tensor_count {
        let (name, grad) = &analytic.params[ti];
        debug_assert_eq!(*name, probe.named_tensors()[ti].0);
        for j in 0..grad.len() {
            let original = probe.named_tensors()[ti].1.values()[j];
            probe.named_tensors_mut()[ti].1.values_mut()[j] = original + epsilon;
            let plus = loss(&probe, input)?;
            probe.named_tensors_mut()[ti].1.values_mut()[j] = original - epsilon;
            let minus = loss(&probe, input)?;
            probe.named_tensors_mut()[ti].1.values_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.values()[j], numeric));
        }
    }

    let mut x = input.clone();
    for j in 0..x.len() {
        let original = x.values()[j];
        x.values_mut()[j] = original + epsilon;
        let plus = loss(layer, &x)?;
        x.values_mut()[j] = original - epsilon;
        let minus = loss(layer, &x)?;
        x.values_mut()[j] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.input.values()[j], numeric));
    }
    Ok(worst)
}
