//! Noise-robustness sweeps over the standard level grids: Gaussian variances
//! [0, 5, 10, 15, 20] (0-255 scale) and salt probabilities
//! [0, 0.02, 0.04, 0.06, 0.08, 0.10] with pepper fixed at 0.04. Level 0 is
//! the noise-free baseline for both protocols and reproduces plain
//! evaluation bit for bit.

use crate::error::Result;
use crate::harness::eval::{evaluate_samples, fmt6};
use crate::metrics::{LossConfig, MetricReport};
use crate::model::UnfoldedNet;
use crate::nn::{derive_seed, ParamStore};
use crate::scene::{add_noise, NoiseKind, NoiseSpec, Sample};

pub const GAUSSIAN_LEVELS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
pub const SALT_LEVELS: [f64; 6] = [0.0, 0.02, 0.04, 0.06, 0.08, 0.10];
pub const PEPPER_PROB: f64 = 0.04;

pub fn default_levels(protocol: NoiseKind) -> Vec<f64> {
    match protocol {
        NoiseKind::Gaussian => GAUSSIAN_LEVELS.to_vec(),
        NoiseKind::SaltPepper => SALT_LEVELS.to_vec(),
    }
}

fn spec_for(protocol: NoiseKind, level: f64) -> NoiseSpec {
    match protocol {
        NoiseKind::Gaussian => NoiseSpec::gaussian(level),
        NoiseKind::SaltPepper => NoiseSpec::salt_pepper(level, PEPPER_PROB),
    }
}

/// Evaluate at every noise level. Level 0 skips the noise stage entirely, so
/// its row equals a plain evaluation of the same samples.
pub fn robustness_sweep(
    net: &UnfoldedNet,
    store: &ParamStore<f32>,
    samples: &[Sample],
    protocol: NoiseKind,
    levels: Option<&[f64]>,
    loss: &LossConfig,
    match_radius: f64,
    seed: u64,
) -> Result<Vec<(f64, MetricReport)>> {
    let levels: Vec<f64> = levels
        .map(|l| l.to_vec())
        .unwrap_or_else(|| default_levels(protocol));
    let mut out = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let report = if level == 0.0 {
            evaluate_samples(net, store, samples, loss, match_radius)?.0
        } else {
            let spec = spec_for(protocol, level);
            let noisy: Result<Vec<Sample>> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let noise_seed = derive_seed(seed, "sweep-noise", (li * samples.len() + i) as u64);
                    Ok(Sample {
                        image: add_noise(&s.image, &spec, noise_seed)?,
                        mask: s.mask.clone(),
                        meta: s.meta.clone(),
                    })
                })
                .collect();
            evaluate_samples(net, store, &noisy?, loss, match_radius)?.0
        };
        out.push((level, report));
    }
    Ok(out)
}

pub const SWEEP_CSV_HEADER: &str = "level,miou,f1,pd,fa,auc";

pub fn sweep_csv(rows: &[(f64, MetricReport)]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for (level, r) in rows {
        out.push_str(&format!(
            "{level},{},{},{},{},{}\n",
            fmt6(r.miou),
            fmt6(r.f1),
            fmt6(r.pd),
            fmt6(r.fa),
            fmt6(r.auc)
        ));
    }
    out
}
