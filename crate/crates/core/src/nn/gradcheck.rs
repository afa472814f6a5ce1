//! Central finite-difference gradient verification.

use std::collections::BTreeMap;

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error observed per parameter name.
    pub per_param: BTreeMap<String, f64>,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "grad_check: worst rel err {:.3e} vs tol {:.1e} -> {}",
            self.worst,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

const FD_EPSILON: f64 = 1e-4;
const MAX_SCALARS: usize = 5000;

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn(store, accumulate)` must return the scalar loss; when
/// `accumulate` is true it must also accumulate analytic gradients into the
/// store. It is called once with accumulation and 2 x N times without.
/// Frozen parameters are skipped: they participate in the forward pass but
/// deliberately accumulate no gradient.
pub fn grad_check<F>(
    store: &mut ParamStore,
    tolerance: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    let names: Vec<String> = store
        .names()
        .filter(|n| !store.is_frozen(n))
        .map(|s| s.to_string())
        .collect();
    let scalars: usize = names
        .iter()
        .map(|n| {
            let t = store.get(n);
            t.rows() * t.cols()
        })
        .sum();
    if scalars > MAX_SCALARS {
        return Err(Error::Config(format!(
            "fragment too large to finite-difference: {scalars} scalars (max {MAX_SCALARS})"
        )));
    }

    store.zero_grads();
    loss_fn(store, true)?;
    let analytic: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|n| (n.clone(), store.grad(n).data().to_vec()))
        .collect();
    store.zero_grads();

    let mut per_param = BTreeMap::new();
    let mut worst = 0.0f64;
    for name in &names {
        let len = {
            let t = store.get(name);
            t.rows() * t.cols()
        };
        let mut max_err = 0.0f64;
        for idx in 0..len {
            let orig = store.get(name).data()[idx];
            store.get_mut(name).data_mut()[idx] = orig + FD_EPSILON;
            let plus = loss_fn(store, false)?;
            store.get_mut(name).data_mut()[idx] = orig - FD_EPSILON;
            let minus = loss_fn(store, false)?;
            store.get_mut(name).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            let a = analytic[name][idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_err = max_err.max(err);
        }
        worst = worst.max(max_err);
        per_param.insert(name.clone(), max_err);
    }
    Ok(GradCheckReport {
        per_param,
        worst,
        tolerance,
        passed: worst < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Layer, LayerInput};
    use crate::nn::LayerSpec;
    use crate::rng::Rng;
    use crate::tensor::Tensor2D;

    /// Squared-error loss through a linear layer; analytic backward.
    fn linear_sq_loss(
        layer: &Layer,
        x: &Tensor2D,
        target: &Tensor2D,
        store: &mut ParamStore,
        accumulate: bool,
    ) -> f64 {
        let (y, cache) = layer.forward(store, LayerInput::Dense(x), None).unwrap();
        let mut loss = 0.0;
        let mut upstream = Tensor2D::zeros(y.rows(), y.cols());
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                let d = y.at(r, c) - target.at(r, c);
                loss += 0.5 * d * d;
                upstream.set(r, c, d);
            }
        }
        if accumulate {
            layer.backward(store, &cache, &upstream).unwrap();
        }
        loss
    }

    #[test]
    fn linear_layer_with_squared_loss_passes_at_1e3() {
        let layer = Layer::new(LayerSpec::Linear { d_in: 5, d_out: 3 }, "lin");
        let mut store = ParamStore::new(1);
        let mut rng = Rng::new(1);
        layer.init(&mut store, &mut rng).unwrap();
        let x = Tensor2D::from_fn(4, 5, |_, _| rng.gaussian());
        let target = Tensor2D::from_fn(4, 3, |_, _| rng.gaussian());
        let report = grad_check(&mut store, 1e-3, |s, acc| {
            Ok(linear_sq_loss(&layer, &x, &target, s, acc))
        })
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let layer = Layer::new(LayerSpec::Linear { d_in: 5, d_out: 3 }, "lin");
        let mut store = ParamStore::new(1);
        let mut rng = Rng::new(2);
        layer.init(&mut store, &mut rng).unwrap();
        let x = Tensor2D::from_fn(4, 5, |_, _| rng.gaussian());
        let target = Tensor2D::from_fn(4, 3, |_, _| rng.gaussian());
        let report = grad_check(&mut store, 1e-3, |s, acc| {
            let loss = linear_sq_loss(&layer, &x, &target, s, acc);
            if acc {
                // Fixture: inject a wrong extra gradient into the bias.
                s.accum_grad("lin.b", &Tensor2D::from_vec(1, 3, vec![0.5, 0.0, 0.0]));
            }
            Ok(loss)
        })
        .unwrap();
        assert!(!report.passed, "corruption must be flagged");
        assert!(report.per_param["lin.b"] > 1e-3);
    }

    #[test]
    fn oversized_fragment_rejected() {
        let mut store = ParamStore::new(1);
        store.add("big", Tensor2D::zeros(100, 51));
        let err = grad_check(&mut store, 1e-3, |_, _| Ok(0.0)).unwrap_err();
        assert!(err.to_string().contains("5000"), "{err}");
    }
}
