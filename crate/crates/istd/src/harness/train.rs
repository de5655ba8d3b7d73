//! The training loop: shuffled mini-batches of the composite loss, Adam
//! updates, periodic validation, Lipschitz monitoring of the gradient
//! networks, and checkpointing. Every byte of output is a deterministic
//! function of (config, seed); resuming from a checkpoint reproduces an
//! uninterrupted run exactly because all randomness is derived per epoch
//! from the base seed.

use std::io::Write;
use std::path::PathBuf;

use ndarray::Array4;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::harness::checkpoint::{self, Checkpoint};
use crate::harness::config::{DataSource, RunConfig};
use crate::harness::eval::{evaluate_samples, fmt6};
use crate::metrics::total_loss_tape;
use crate::model::{
    apply_bn_updates, estimate_lipschitz, GradNetKind, ModuleKind, Phase, UnfoldedNet, BN_MOMENTUM,
};
use crate::nn::{derive_seed, rng_for, AdamConfig, AdamState, ParamStore, Tape};
use crate::scene::{split_indices, Sample};

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: u32,
    pub seg: f64,
    pub fid: f64,
    pub total: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LipschitzRow {
    pub epoch: u32,
    pub module: GradNetKind,
    pub stage: usize,
    pub estimate: f64,
}

#[derive(Debug)]
pub struct TrainedArtifacts {
    pub log_path: PathBuf,
    pub lipschitz_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub rows: Vec<EpochRow>,
    pub lipschitz_rows: Vec<LipschitzRow>,
    pub final_val_miou: f64,
    pub best_val_miou: f64,
}

/// Materialize the configured data source. Synthetic scenes derive their
/// seeds from the run seed, so the dataset is part of the run's determinism
/// envelope.
pub fn load_run_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data {
        None => Err(Error::InvalidConfig(
            "no data source configured (set data.dir or data.synth.*)".into(),
        )),
        Some(DataSource::Directory(p)) => crate::scene::load_dataset(p),
        Some(DataSource::Synthetic(spec)) => {
            let mut scene = spec.scene.clone();
            scene.seed = derive_seed(cfg.seed, "data", 0);
            crate::scene::synth_dataset(&scene, spec.count)
        }
    }
}

fn check_uniform_shapes(samples: &[Sample]) -> Result<(usize, usize)> {
    let Some(first) = samples.first() else {
        return Err(Error::Data("dataset is empty".into()));
    };
    let dim = first.image.dim();
    for (i, s) in samples.iter().enumerate() {
        if s.image.dim() != dim {
            return Err(Error::Data(format!(
                "sample {i} has shape {:?}, expected {dim:?}; training batches need uniform shapes",
                s.image.dim()
            )));
        }
    }
    Ok(dim)
}

fn assemble_batch(samples: &[Sample], idxs: &[usize]) -> (Array4<f32>, Array4<f32>) {
    let (h, w) = samples[idxs[0]].image.dim();
    let b = idxs.len();
    let mut images = Array4::<f32>::zeros((b, 1, h, w));
    let mut masks = Array4::<f32>::zeros((b, 1, h, w));
    for (bi, &si) in idxs.iter().enumerate() {
        let s = &samples[si];
        for y in 0..h {
            for x in 0..w {
                images[(bi, 0, y, x)] = s.image[(y, x)] as f32;
                masks[(bi, 0, y, x)] = f32::from(s.mask[(y, x)]);
            }
        }
    }
    (images, masks)
}

/// Locate the first non-finite plane in a forward trace, for the abort
/// diagnostic demanded when the loss turns NaN.
fn locate_non_finite(tape: &Tape<f32>, out: &crate::model::ForwardOutput<f32>) -> String {
    for (k, s) in out.stages.iter().enumerate() {
        for (var, module) in [
            (s.background, ModuleKind::Sebem),
            (s.target, ModuleKind::Setem),
            (s.noise, ModuleKind::Senrm),
            (s.recon, ModuleKind::Seirm),
        ] {
            if tape.value(var).iter().any(|v| !v.is_finite()) {
                return format!("stage {} ({} output)", k + 1, module.name());
            }
        }
    }
    "loss reduction".to_string()
}

struct Monitor {
    val_miou: f64,
    lipschitz: Vec<LipschitzRow>,
}

fn run_monitors(
    cfg: &RunConfig,
    net: &UnfoldedNet,
    store: &ParamStore<f32>,
    val: &[Sample],
    spatial: (usize, usize),
    epoch: u32,
) -> Result<Monitor> {
    let val_miou = if val.is_empty() {
        f64::NAN
    } else {
        let (report, _) = evaluate_samples(net, store, val, &cfg.loss, cfg.match_radius)?;
        report.miou
    };
    let mut lipschitz = Vec::new();
    for module in [GradNetKind::Setem, GradNetKind::Senrm] {
        for stage in 0..cfg.model.stages {
            // fixed probe seed: the same probe set every epoch makes the
            // series comparable across training
            let est = estimate_lipschitz(
                net,
                store,
                module,
                stage,
                cfg.lipschitz_probes.max(2),
                spatial,
                derive_seed(cfg.seed, "lipschitz", 0),
            )?;
            lipschitz.push(LipschitzRow {
                epoch,
                module,
                stage,
                estimate: est.estimate,
            });
        }
    }
    Ok(Monitor { val_miou, lipschitz })
}

/// Train per the configuration; honors `cfg.resume`. Returns paths of the
/// artifacts written under `cfg.output_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainedArtifacts> {
    cfg.validate()?;
    let net = UnfoldedNet::new(cfg.model)?;
    let samples = load_run_data(cfg)?;
    let (h, w) = check_uniform_shapes(&samples)?;

    let (train_idx, val_idx) = split_indices(
        samples.len(),
        cfg.val_fraction,
        derive_seed(cfg.seed, "split", 0),
    );
    if train_idx.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_samples: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    let (mut store, mut adam, start_epoch, mut best_val) = match &cfg.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path, Some(&cfg.model))?;
            if ckpt.base_seed != cfg.seed {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint was trained with seed {}, run configured with {}",
                    ckpt.base_seed, cfg.seed
                )));
            }
            (ckpt.store, ckpt.adam, ckpt.epoch, ckpt.best_val_miou)
        }
        None => {
            let store = net.init_params::<f32>(derive_seed(cfg.seed, "init", 0))?;
            let adam = AdamState::new(
                AdamConfig {
                    lr: cfg.optimizer.lr,
                    ..AdamConfig::default()
                },
                &store,
            );
            (store, adam, 0u32, f64::NEG_INFINITY)
        }
    };
    let total_epochs = cfg.optimizer.epochs as u32;
    if start_epoch >= total_epochs {
        return Err(Error::InvalidConfig(format!(
            "checkpoint already at epoch {start_epoch}, nothing to do for {total_epochs} epochs"
        )));
    }

    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("run.cfg"), cfg.to_text())?;
    let log_path = cfg.output_dir.join("train.csv");
    let lipschitz_path = cfg.output_dir.join("lipschitz.csv");
    let last_path = cfg.output_dir.join("last.ckpt");
    let best_path = cfg.output_dir.join("best.ckpt");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "epoch,seg_loss,fidelity_loss,total_loss,val_miou")?;
    let mut lip_log = std::io::BufWriter::new(std::fs::File::create(&lipschitz_path)?);
    writeln!(lip_log, "epoch,module,stage,estimate")?;

    let mut rows = Vec::new();
    let mut lipschitz_rows = Vec::new();
    let mut final_val = f64::NAN;

    for epoch in start_epoch..total_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));

        let mut seg_sum = 0.0f64;
        let mut fid_sum = 0.0f64;
        let mut total_sum = 0.0f64;
        for (batch_no, batch) in order.chunks(cfg.optimizer.batch_size).enumerate() {
            let (images, masks) = assemble_batch(&samples, batch);
            let mut tape = Tape::<f32>::new();
            let input = tape.leaf(images);
            let gt = tape.leaf(masks);
            let mut bn_updates = Vec::new();
            let out = net.forward(&mut tape, &store, input, Phase::Train, false, &mut bn_updates)?;
            let pred = tape.sigmoid(out.target);
            let (total, seg, fid) =
                total_loss_tape(&mut tape, pred, gt, out.recon, input, cfg.loss.eta)?;
            let total_v = tape.value(total)[(0, 0, 0, 0)] as f64;
            let seg_v = tape.value(seg)[(0, 0, 0, 0)] as f64;
            let fid_v = tape.value(fid)[(0, 0, 0, 0)] as f64;
            if !total_v.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became non-finite at epoch {}, batch {}: first bad plane in {}",
                    epoch + 1,
                    batch_no,
                    locate_non_finite(&tape, &out)
                )));
            }
            tape.backward(total)?;
            store.zero_grad();
            tape.accumulate_param_grads(&mut store);
            apply_bn_updates(&mut store, bn_updates, BN_MOMENTUM)?;
            adam.step(&mut store)?;

            let weight = batch.len() as f64;
            seg_sum += seg_v * weight;
            fid_sum += fid_v * weight;
            total_sum += total_v * weight;
        }
        let n = order.len() as f64;
        let (seg_epoch, fid_epoch, total_epoch) = (seg_sum / n, fid_sum / n, total_sum / n);

        let epoch1 = epoch + 1;
        let at_cadence = epoch1 % cfg.val_every as u32 == 0 || epoch1 == total_epochs;
        let mut val_cell = None;
        if at_cadence {
            let monitor = run_monitors(cfg, &net, &store, &val_samples, (h, w), epoch1)?;
            for row in &monitor.lipschitz {
                writeln!(
                    lip_log,
                    "{},{},{},{}",
                    row.epoch,
                    row.module.name(),
                    row.stage,
                    fmt6(row.estimate)
                )?;
            }
            lipschitz_rows.extend(monitor.lipschitz);
            if !monitor.val_miou.is_nan() {
                val_cell = Some(monitor.val_miou);
                final_val = monitor.val_miou;
            }

            let ckpt = Checkpoint {
                model: cfg.model,
                epoch: epoch1,
                base_seed: cfg.seed,
                best_val_miou: best_val,
                store: store.clone(),
                adam: adam.clone(),
            };
            checkpoint::save(&ckpt, &last_path)?;
            let improved = val_cell.map(|v| v > best_val).unwrap_or(true);
            if improved {
                if let Some(v) = val_cell {
                    best_val = v;
                }
                let best_ckpt = Checkpoint {
                    best_val_miou: best_val,
                    store: store.clone(),
                    adam: adam.clone(),
                    ..ckpt
                };
                checkpoint::save(&best_ckpt, &best_path)?;
            }
        }

        let val_text = val_cell.map(fmt6).unwrap_or_default();
        writeln!(
            log,
            "{},{},{},{},{}",
            epoch1,
            fmt6(seg_epoch),
            fmt6(fid_epoch),
            fmt6(total_epoch),
            val_text
        )?;
        rows.push(EpochRow {
            epoch: epoch1,
            seg: seg_epoch,
            fid: fid_epoch,
            total: total_epoch,
            val_miou: val_cell,
        });
    }
    log.flush()?;
    lip_log.flush()?;

    // final checkpoint reflects the last epoch even off-cadence
    let ckpt = Checkpoint {
        model: cfg.model,
        epoch: total_epochs,
        base_seed: cfg.seed,
        best_val_miou: best_val,
        store: store.clone(),
        adam: adam.clone(),
    };
    checkpoint::save(&ckpt, &last_path)?;
    if !best_path.exists() {
        checkpoint::save(&ckpt, &best_path)?;
    }

    Ok(TrainedArtifacts {
        log_path,
        lipschitz_path,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        rows,
        lipschitz_rows,
        final_val_miou: final_val,
        best_val_miou: best_val,
    })
}
