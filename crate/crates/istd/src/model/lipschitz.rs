//! Sampling-based Lipschitz monitoring for the learned gradient networks of
//! SETEM and SENRM. The estimate is the maximum Frobenius difference quotient
//! over random probe pairs, hence a lower bound on the true constant; during
//! training it settling to a stable value is the signal of interest.

use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::blocks::Phase;
use crate::model::network::UnfoldedNet;
use crate::model::ModuleKind;
use crate::nn::{rng_for, ParamStore, Scalar, Tape};

/// Which gradient network to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradNetKind {
    Setem,
    Senrm,
}

impl GradNetKind {
    pub fn name(self) -> &'static str {
        match self {
            GradNetKind::Setem => "setem",
            GradNetKind::Senrm => "senrm",
        }
    }

    fn module(self) -> ModuleKind {
        match self {
            GradNetKind::Setem => ModuleKind::Setem,
            GradNetKind::Senrm => ModuleKind::Senrm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LipschitzEstimate {
    pub module: GradNetKind,
    pub stage: usize,
    pub estimate: f64,
    pub sample_count: usize,
}

fn normal_plane<F: Scalar, R: Rng>(rng: &mut R, h: usize, w: usize) -> Array4<F> {
    Array4::from_shape_simple_fn((1, 1, h, w), || {
        let z: f64 = rng.sample(StandardNormal);
        F::from_f64(z)
    })
}

fn frob_norm<F: Scalar>(x: &Array4<F>) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Max difference quotient `|g(x1) - g(x2)|_F / |x1 - x2|_F` of the chosen
/// stage's gradient network over `probe_count` standard-normal probe pairs.
/// Coincident pairs are skipped; if every pair coincides the estimate is
/// undefined and an error is returned.
pub fn estimate_lipschitz<F: Scalar>(
    net: &UnfoldedNet,
    store: &ParamStore<F>,
    module: GradNetKind,
    stage: usize,
    probe_count: usize,
    spatial: (usize, usize),
    seed: u64,
) -> Result<LipschitzEstimate> {
    if probe_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "lipschitz probing needs at least 2 probe pairs, got {probe_count}"
        )));
    }
    if stage >= net.config().stages {
        return Err(Error::InvalidArgument(format!(
            "stage {stage} out of range for a {}-stage model",
            net.config().stages
        )));
    }
    let (h, w) = spatial;
    let group = net.group(stage, module.module());
    let mut rng = rng_for(seed, "lipschitz", (stage as u64) << 1 | (module as u64));
    let mut best = 0.0f64;
    let mut used = 0usize;
    for _ in 0..probe_count {
        let x1 = normal_plane::<F, _>(&mut rng, h, w);
        let x2 = normal_plane::<F, _>(&mut rng, h, w);
        let denom = frob_norm(&(&x1 - &x2));
        if denom == 0.0 {
            continue;
        }
        let mut tape = Tape::new();
        let v1 = tape.leaf(x1);
        let v2 = tape.leaf(x2);
        let mut upds = Vec::new();
        let g1 = group.forward(&mut tape, store, v1, Phase::Eval, &mut upds)?;
        let g2 = group.forward(&mut tape, store, v2, Phase::Eval, &mut upds)?;
        let diff = tape.value(g1) - tape.value(g2);
        let quotient = frob_norm(&diff) / denom;
        best = best.max(quotient);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Numerical(
            "all lipschitz probe pairs were coincident".into(),
        ));
    }
    Ok(LipschitzEstimate {
        module,
        stage,
        estimate: best,
        sample_count: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SeFlags};
    use approx::assert_relative_eq;
    use ndarray::Array4;

    fn plain_config() -> ModelConfig {
        // no SE so the gradient network is a pure conv/relu stack
        ModelConfig {
            stages: 1,
            bottleneck_channels: 2,
            channels: 4,
            n_fill: 0,
            recon_layers: 1,
            se_ratio: 2,
            se: SeFlags::ALL_OFF,
        }
    }

    fn zero_group(store: &mut ParamStore<f64>, prefix: &str) {
        let names: Vec<String> = store
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.name.clone())
            .collect();
        for n in names {
            store.get_mut(&n).unwrap().value.fill(0.0);
        }
    }

    #[test]
    fn zero_map_estimates_zero() {
        let net = UnfoldedNet::new(plain_config()).unwrap();
        let mut store = net.init_params::<f64>(1).unwrap();
        zero_group(&mut store, "stage0.setem.");
        let est =
            estimate_lipschitz(&net, &store, GradNetKind::Setem, 0, 8, (8, 8), 42).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(est.sample_count, 8);
    }

    /// A hand-built linear path through the group: first conv lifts with a
    /// delta kernel into channel 0, middle convs pass through, projection
    /// scales by `a`. The whole map is `a * identity` on positive inputs...
    /// to keep it exactly linear we also bias ReLUs away (inputs shifted
    /// positive is not available here), so instead we exploit linearity of
    /// difference quotients only for a single positive-scaled delta path by
    /// setting the scale on the projection and keeping ReLU out of the way
    /// with large first-layer bias.
    #[test]
    fn scaled_identity_estimates_the_scale() {
        let net = UnfoldedNet::new(plain_config()).unwrap();
        let mut store = net.init_params::<f64>(2).unwrap();
        zero_group(&mut store, "stage0.setem.");
        // conv0: channel 0 = delta(x), bias 50 on every bottleneck channel so
        // the ReLU is in its linear region for unit-scale probes
        let mut k0 = Array4::zeros((2, 1, 3, 3));
        k0[(0, 0, 1, 1)] = 1.0;
        store.set_value("stage0.setem.conv0.weight", k0).unwrap();
        store
            .set_value(
                "stage0.setem.conv0.bias",
                Array4::from_elem((1, 2, 1, 1), 50.0),
            )
            .unwrap();
        // conv1: channel 0 = delta of bottleneck channel 0, bias 200
        let mut k1 = Array4::zeros((4, 2, 3, 3));
        k1[(0, 0, 1, 1)] = 1.0;
        store.set_value("stage0.setem.conv1.weight", k1).unwrap();
        store
            .set_value(
                "stage0.setem.conv1.bias",
                Array4::from_elem((1, 4, 1, 1), 200.0),
            )
            .unwrap();
        // projection: pick channel 0 scaled by a
        let a = 1.75;
        let mut kp = Array4::zeros((1, 4, 3, 3));
        kp[(0, 0, 1, 1)] = a;
        store.set_value("stage0.setem.proj.weight", kp).unwrap();

        let est =
            estimate_lipschitz(&net, &store, GradNetKind::Setem, 0, 16, (8, 8), 7).unwrap();
        // differences cancel the biases, leaving exactly a * (x1 - x2)
        assert_relative_eq!(est.estimate, a, epsilon = 1e-9);
    }

    /// Power iteration on the linearized conv map (adjoint via the conv
    /// backward rule) gives the operator norm; random difference quotients
    /// must stay below it and creep toward it as probes accumulate.
    #[test]
    fn random_linear_conv_estimate_bounded_by_operator_norm() {
        let net = UnfoldedNet::new(plain_config()).unwrap();
        let mut store = net.init_params::<f64>(3).unwrap();
        zero_group(&mut store, "stage0.setem.");
        let mut rng = crate::nn::rng_for(4, "lip-test", 0);
        let k0 = crate::nn::init::kaiming::<f64, _>((2, 1, 3, 3), 9, &mut rng);
        store
            .set_value("stage0.setem.conv0.weight", k0.clone())
            .unwrap();
        store
            .set_value(
                "stage0.setem.conv0.bias",
                Array4::from_elem((1, 2, 1, 1), 100.0),
            )
            .unwrap();
        let k1 = crate::nn::init::kaiming::<f64, _>((4, 2, 3, 3), 18, &mut rng);
        store
            .set_value("stage0.setem.conv1.weight", k1.clone())
            .unwrap();
        store
            .set_value(
                "stage0.setem.conv1.bias",
                Array4::from_elem((1, 4, 1, 1), 1000.0),
            )
            .unwrap();
        let kp = crate::nn::init::kaiming::<f64, _>((1, 4, 3, 3), 36, &mut rng);
        store.set_value("stage0.setem.proj.weight", kp.clone()).unwrap();

        // With biases huge, every ReLU is linear over unit-scale probes, so
        // the composite is the linear map proj . conv1 . conv0 (plus a
        // constant). Estimate its operator norm by power iteration using the
        // tape's backward pass as the adjoint.
        let (h, w) = (8, 8);
        let shape = (1usize, 1usize, h, w);
        let forward_linear = |x: &Array4<f64>| -> Array4<f64> {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let kk0 = tape.leaf(k0.clone());
            let b0 = tape.leaf(Array4::zeros((1, 2, 1, 1)));
            let y0 = tape.conv2d(v, kk0, b0).unwrap();
            let kk1 = tape.leaf(k1.clone());
            let b1 = tape.leaf(Array4::zeros((1, 4, 1, 1)));
            let y1 = tape.conv2d(y0, kk1, b1).unwrap();
            let kkp = tape.leaf(kp.clone());
            let bp = tape.leaf(Array4::zeros((1, 1, 1, 1)));
            let y = tape.conv2d(y1, kkp, bp).unwrap();
            tape.value(y).clone()
        };
        // adjoint: gradient of <forward(x), u> w.r.t. x
        let adjoint = |u: &Array4<f64>| -> Array4<f64> {
            let mut tape = Tape::new();
            let v = tape.leaf(Array4::zeros(shape));
            let kk0 = tape.leaf(k0.clone());
            let b0 = tape.leaf(Array4::zeros((1, 2, 1, 1)));
            let y0 = tape.conv2d(v, kk0, b0).unwrap();
            let kk1 = tape.leaf(k1.clone());
            let b1 = tape.leaf(Array4::zeros((1, 4, 1, 1)));
            let y1 = tape.conv2d(y0, kk1, b1).unwrap();
            let kkp = tape.leaf(kp.clone());
            let bp = tape.leaf(Array4::zeros((1, 1, 1, 1)));
            let y = tape.conv2d(y1, kkp, bp).unwrap();
            let uv = tape.leaf(u.clone());
            let prod = tape.mul(y, uv).unwrap();
            let s = tape.sum_per_image(prod);
            let loss = tape.mean_all(s);
            tape.backward(loss).unwrap();
            tape.grad(v).unwrap().clone()
        };
        let mut x = normal_plane::<f64, _>(&mut rng, h, w);
        for _ in 0..60 {
            let y = forward_linear(&x);
            let z = adjoint(&y);
            let n = frob_norm(&z);
            if n == 0.0 {
                break;
            }
            x = z.mapv(|v| v / n);
        }
        let opnorm = frob_norm(&forward_linear(&x)) / frob_norm(&x);

        let few = estimate_lipschitz(&net, &store, GradNetKind::Setem, 0, 4, (h, w), 11)
            .unwrap()
            .estimate;
        let many = estimate_lipschitz(&net, &store, GradNetKind::Setem, 0, 64, (h, w), 11)
            .unwrap()
            .estimate;
        assert!(few <= many + 1e-12, "max over a prefix cannot exceed the total");
        assert!(
            many <= opnorm * (1.0 + 1e-6),
            "difference quotient {many} exceeds operator norm {opnorm}"
        );
        assert!(
            many >= 0.2 * opnorm,
            "with 64 probes the estimate {many} should approach the norm {opnorm}"
        );
    }

    #[test]
    fn probe_count_below_two_is_rejected() {
        let net = UnfoldedNet::new(plain_config()).unwrap();
        let store = net.init_params::<f64>(5).unwrap();
        assert!(estimate_lipschitz(&net, &store, GradNetKind::Senrm, 0, 1, (8, 8), 0).is_err());
    }
}
