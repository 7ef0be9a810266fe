//! Central finite-difference oracle for analytic gradients.

use super::Params;

/// Relative error with an absolute floor of 1e-6.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_above(analytic, numeric, 1e-6)
}

pub fn relative_error_above(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Denominator floor for one tensor: 1e-3 of its largest gradient, and never
/// below 1e-6. Coordinates whose true gradient is exactly zero (key biases
/// under softmax shift invariance) otherwise score pure roundoff as error.
pub fn tensor_floor(grad: &[f64]) -> f64 {
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    (1e-3 * scale).max(1e-6)
}

/// Compare `analytic` against central differences of `loss` around `params`.
///
/// Checks up to `per_tensor` evenly spaced coordinates of each tensor and
/// returns the worst relative error, floored per tensor by [`tensor_floor`].
pub fn max_relative_error<P, F>(params: &P, analytic: &P, loss: F, h: f64, per_tensor: usize) -> f64
where
    P: Params + Clone,
    F: Fn(&P) -> f64,
{
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (ti, &len) in sizes.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let floor = tensor_floor(&grads[ti]);
        let stride = (len / per_tensor.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let orig = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[ti][i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error_above(grads[ti][i], numeric, floor));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_tracks_tensor_scale() {
        assert_eq!(tensor_floor(&[0.0, 0.0]), 1e-6);
        assert!((tensor_floor(&[0.2, -0.5]) - 5e-4).abs() < 1e-18);
        // Roundoff against an exact zero is not error once the tensor has scale.
        assert!(relative_error_above(0.0, 3e-10, tensor_floor(&[0.0, 0.1])) < 1e-5);
        assert!(relative_error(0.0, 3e-10) > 1e-4);
        // A genuine mistake still shows up.
        assert!(relative_error_above(0.1, 0.11, tensor_floor(&[0.1])) > 0.05);
    }
}
