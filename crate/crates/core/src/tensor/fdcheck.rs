//! Central finite-difference gradient checker.

use super::param::ParamStore;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn` rebuilds the loss graph from the current parameter values and
/// returns the scalar loss node. Returns the maximum over all trainable
/// entries of `|analytic - central| / max(|analytic|, |central|, 1e-6)`.
/// The absolute floor keeps f64 cancellation noise in the central
/// differences from inflating the relative error of near-zero gradients.
pub fn finite_diff_check<F>(mut loss_fn: F, store: &mut ParamStore, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite_diff_check: step must be positive"));
    }

    // Analytic pass.
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(Error::contract("finite_diff_check: loss must be scalar"));
    }
    tape.backward(loss, store)?;
    let analytic: Vec<(usize, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id.0, p.grad.as_slice().to_vec()))
        .collect();

    let eval = |store: &ParamStore, loss_fn: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let node = loss_fn(&mut tape, store)?;
        Ok(tape.value(node).get(0, 0))
    };

    let mut max_rel = 0.0f64;
    for (pidx, grads) in analytic {
        for k in 0..grads.len() {
            let id = crate::tensor::param::ParamId(pidx);
            let orig = store.get(id).value.as_slice()[k];

            store.get_mut(id).value.as_mut_slice()[k] = orig + step;
            let up = eval(store, &mut loss_fn)?;
            store.get_mut(id).value.as_mut_slice()[k] = orig - step;
            let down = eval(store, &mut loss_fn)?;
            store.get_mut(id).value.as_mut_slice()[k] = orig;

            let central = (up - down) / (2.0 * step);
            let rel = (grads[k] - central).abs() / grads[k].abs().max(central.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::matrix::DenseMatrix;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        // loss = sum((W x)^2) via mul; quadratic so central differences are exact
        let mut store = ParamStore::new();
        let w = store.register(
            "w",
            DenseMatrix::from_vec(2, 2, vec![0.3, -0.1, 0.7, 0.2]),
            true,
        );
        let x = DenseMatrix::from_vec(2, 1, vec![0.5, -0.4]);
        let err = finite_diff_check(
            |tape, store| {
                let wn = tape.param(store, w)?;
                let xn = tape.constant(x.clone())?;
                let y = tape.matmul(wn, xn)?;
                let y2 = tape.mul(y, y)?;
                tape.sum(y2)
            },
            &mut store,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn frozen_only_model_is_vacuously_zero() {
        let mut store = ParamStore::new();
        let w = store.register("w", DenseMatrix::identity(2), false);
        let err = finite_diff_check(
            |tape, store| {
                let wn = tape.param(store, w)?;
                tape.sum(wn)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_loss_grad_is_input() {
        // loss = sum(W x): dW = x^T broadcast per row
        let mut store = ParamStore::new();
        let w = store.register("w", DenseMatrix::zeros(2, 2), true);
        let x = DenseMatrix::from_vec(2, 1, vec![2.0, -3.0]);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w).unwrap();
        let xn = tape.constant(x).unwrap();
        let y = tape.matmul(wn, xn).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let g = &store.get(w).grad;
        assert_eq!(g.as_slice(), &[2.0, -3.0, 2.0, -3.0]);
    }

    #[test]
    fn loss_independent_of_param_gives_zero_grad() {
        let mut store = ParamStore::new();
        let w = store.register("w", DenseMatrix::identity(3), true);
        let c = DenseMatrix::from_vec(1, 2, vec![1.0, 4.0]);
        let mut tape = Tape::new();
        let _wn = tape.param(&store, w).unwrap();
        let cn = tape.constant(c).unwrap();
        let loss = tape.sum(cn).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(w).grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn random_three_layer_composition_matches_finite_differences() {
        let mut rng = RngStream::new(11);
        let mut store = ParamStore::new();
        let w1 = store.register("w1", DenseMatrix::randn(4, 3, 0.5, &mut rng), true);
        let w2 = store.register("w2", DenseMatrix::randn(4, 4, 0.5, &mut rng), true);
        let w3 = store.register("w3", DenseMatrix::randn(2, 4, 0.5, &mut rng), true);
        let x = DenseMatrix::randn(3, 1, 1.0, &mut rng);
        let err = finite_diff_check(
            |tape, store| {
                let x0 = tape.constant(x.clone())?;
                let a = tape.param(store, w1)?;
                let h1 = tape.matmul(a, x0)?;
                let h1 = tape.tanh(h1)?;
                let b = tape.param(store, w2)?;
                let h2 = tape.matmul(b, h1)?;
                let h2 = tape.tanh(h2)?;
                let c = tape.param(store, w3)?;
                let logits = tape.matmul(c, h2)?;
                let logits_t = tape.transpose(logits)?;
                tape.cross_entropy(logits_t, &[1])
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let w = store.register("w", DenseMatrix::identity(2), true);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w).unwrap();
        let err = tape.backward(wn, &mut store).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }
}
