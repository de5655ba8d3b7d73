//! Gradient verification: reverse-mode gradients against central finite
//! differences. Meant to run in `f64`; the finite-difference step is tuned
//! for unit-scale data.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::param::ParamStore;
use crate::nn::rng::rng_for;
use crate::nn::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub samples: usize,
}

/// Default central-difference step for unit-scale data.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare analytic gradients with central finite differences.
///
/// `eval(store, with_grad)` must return the scalar loss; when `with_grad` is
/// true it must also accumulate gradients into the store. Up to
/// `samples_per_param` scalar coordinates of every trainable parameter are
/// probed (inputs participate by being registered as trainable parameters).
/// The store is restored to its entry state before returning, including any
/// buffers the evaluation mutates.
pub fn grad_check<F, E>(
    store: &mut ParamStore<F>,
    mut eval: E,
    samples_per_param: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Scalar,
    E: FnMut(&mut ParamStore<F>, bool) -> Result<F>,
{
    let snapshot: Vec<_> = store.iter().map(|p| p.value.clone()).collect();
    let restore = |store: &mut ParamStore<F>, snap: &[ndarray::Array4<F>]| {
        for (i, v) in snap.iter().enumerate() {
            store.by_index_mut(i).value = v.clone();
        }
    };

    store.zero_grad();
    let base = eval(store, true)?;
    if !base.as_f64().is_finite() {
        restore(store, &snapshot);
        return Err(Error::NonFinite("gradient-check base loss".into()));
    }
    let analytic: Vec<_> = store.iter().map(|p| p.grad.clone()).collect();

    let mut rng = rng_for(seed, "gradcheck", 0);
    let h = F::from_f64(step);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut samples = 0usize;

    for idx in 0..store.len() {
        if !store.by_index(idx).trainable {
            continue;
        }
        let name = store.by_index(idx).name.clone();
        let len = store.by_index(idx).value.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > samples_per_param {
            // sample without replacement
            for i in 0..samples_per_param {
                let j = rng.gen_range(i..len);
                coords.swap(i, j);
            }
            coords.truncate(samples_per_param);
        }
        for &ci in &coords {
            let original = store.by_index(idx).value.as_slice().expect("layout")[ci];

            store.by_index_mut(idx).value.as_slice_mut().expect("layout")[ci] = original + h;
            let up = eval(store, false)?;
            store.by_index_mut(idx).value.as_slice_mut().expect("layout")[ci] = original - h;
            let down = eval(store, false)?;
            store.by_index_mut(idx).value.as_slice_mut().expect("layout")[ci] = original;

            if !up.as_f64().is_finite() || !down.as_f64().is_finite() {
                restore(store, &snapshot);
                return Err(Error::NonFinite(format!(
                    "gradient-check probe of `{name}`"
                )));
            }
            let numeric = (up.as_f64() - down.as_f64()) / (2.0 * step);
            let a = analytic[idx].as_slice().expect("layout")[ci].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            samples += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = name.clone();
            }
        }
    }

    restore(store, &snapshot);
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use crate::nn::tape::Tape;
    use ndarray::Array4;

    /// Linear network: loss = mean(conv(x)). Gradients of a linear map are
    /// exact, so the check should sit at machine-precision scale.
    #[test]
    fn linear_network_checks_at_machine_precision() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(1, "gc-lin", 0);
        store
            .insert("x", init::kaiming((1, 2, 5, 5), 1, &mut rng), true)
            .unwrap();
        store
            .insert("k", init::kaiming((3, 2, 3, 3), 18, &mut rng), true)
            .unwrap();
        store.insert("b", init::zeros((1, 3, 1, 1)), true).unwrap();

        let report = grad_check(
            &mut store,
            |store, with_grad| {
                let mut tape = Tape::new();
                let x = tape.param(store, "x")?;
                let k = tape.param(store, "k")?;
                let b = tape.param(store, "b")?;
                let y = tape.conv2d(x, k, b)?;
                let loss = tape.mean_all(y);
                let value = tape.value(loss)[(0, 0, 0, 0)];
                if with_grad {
                    tape.backward(loss)?;
                    tape.accumulate_param_grads(store);
                }
                Ok(value)
            },
            16,
            DEFAULT_STEP,
            7,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-8,
            "linear map should be near-exact, got {}",
            report.max_rel_error
        );
    }

    fn composite_eval(
        store: &mut ParamStore<f64>,
        with_grad: bool,
        corrupt: bool,
    ) -> crate::error::Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(store, "x")?;
        let k = tape.param(store, "k")?;
        let kb = tape.param(store, "kb")?;
        let w = tape.param(store, "w")?;
        let wb = tape.param(store, "wb")?;
        let y = tape.conv2d(x, k, kb)?;
        let y = tape.relu(y);
        let pooled = tape.global_avg_pool(y)?;
        let z = tape.dense(pooled, w, wb)?;
        let z = tape.sigmoid(z);
        let loss = tape.mean_all(z);
        let value = tape.value(loss)[(0, 0, 0, 0)];
        if with_grad {
            tape.backward(loss)?;
            tape.accumulate_param_grads(store);
            if corrupt {
                // fault injection: break the stored gradient of the kernel
                let g = &mut store.get_mut("k")?.grad;
                g.mapv_inplace(|v| v * 1.5 + 0.01);
            }
        }
        Ok(value)
    }

    fn composite_store() -> ParamStore<f64> {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(2, "gc-composite", 0);
        store
            .insert("x", init::kaiming((2, 2, 6, 6), 1, &mut rng), true)
            .unwrap();
        store
            .insert("k", init::kaiming((4, 2, 3, 3), 18, &mut rng), true)
            .unwrap();
        store.insert("kb", init::zeros((1, 4, 1, 1)), true).unwrap();
        store
            .insert("w", init::kaiming((3, 4, 1, 1), 4, &mut rng), true)
            .unwrap();
        store.insert("wb", init::zeros((1, 3, 1, 1)), true).unwrap();
        store
    }

    #[test]
    fn composite_network_passes_within_tolerance() {
        let mut store = composite_store();
        let report = grad_check(
            &mut store,
            |s, g| composite_eval(s, g, false),
            12,
            DEFAULT_STEP,
            11,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "composite check failed: {} (worst {})",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn corrupted_backward_rule_is_flagged() {
        let mut store = composite_store();
        let report = grad_check(
            &mut store,
            |s, g| composite_eval(s, g, true),
            12,
            DEFAULT_STEP,
            11,
        )
        .unwrap();
        assert!(
            report.max_rel_error > 1e-2,
            "fault injection should trip the check, got {}",
            report.max_rel_error
        );
        assert_eq!(report.worst_param, "k");
    }

    #[test]
    fn store_is_restored_after_probing() {
        let mut store = composite_store();
        let before: Vec<Array4<f64>> = store.iter().map(|p| p.value.clone()).collect();
        grad_check(
            &mut store,
            |s, g| composite_eval(s, g, false),
            4,
            DEFAULT_STEP,
            3,
        )
        .unwrap();
        for (p, b) in store.iter().zip(before.iter()) {
            assert_eq!(&p.value, b);
        }
    }
}
