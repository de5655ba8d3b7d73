//! Gradient verification entry points: per-layer checks and a full-model
//! check, all in 64-bit precision where central differences are valid.

use ndarray::Array4;
use rand::Rng;

use crate::error::Result;
use crate::metrics::total_loss_tape;
use crate::model::{ModelConfig, Phase, UnfoldedNet};
use crate::nn::{grad_check, init, rng_for, GradCheckReport, ParamStore, Tape, DEFAULT_STEP};

/// Check one layer type in isolation; the loss is the mean of the layer
/// output (wrapped in a sigmoid to exercise a nonlinear head).
fn check_layer<F>(name: &str, mut build: F, seed: u64) -> Result<(String, GradCheckReport)>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<crate::nn::Var>,
{
    let mut store = layer_store(name, seed)?;
    let report = grad_check(
        &mut store,
        |store, with_grad| {
            let mut tape = Tape::new();
            let out = build(&mut tape, store)?;
            let squashed = tape.sigmoid(out);
            let loss = tape.mean_all(squashed);
            let v = tape.value(loss)[(0, 0, 0, 0)];
            if with_grad {
                tape.backward(loss)?;
                tape.accumulate_param_grads(store);
            }
            Ok(v)
        },
        8,
        DEFAULT_STEP,
        seed,
    )?;
    Ok((name.to_string(), report))
}

fn layer_store(kind: &str, seed: u64) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_for(seed, "gradcheck-layer", 0);
    match kind {
        "conv2d" => {
            store.insert("x", init::kaiming((2, 3, 6, 6), 1, &mut rng), true)?;
            store.insert("k", init::kaiming((4, 3, 3, 3), 27, &mut rng), true)?;
            store.insert("b", init::kaiming((1, 4, 1, 1), 4, &mut rng), true)?;
        }
        "batchnorm_train" | "batchnorm_eval" => {
            store.insert("x", init::kaiming((3, 2, 5, 5), 1, &mut rng), true)?;
            store.insert("gamma", init::kaiming((1, 2, 1, 1), 1, &mut rng), true)?;
            store.insert("beta", init::kaiming((1, 2, 1, 1), 1, &mut rng), true)?;
        }
        "relu" | "sigmoid" | "global_avg_pool" => {
            store.insert("x", init::kaiming((2, 3, 5, 5), 1, &mut rng), true)?;
        }
        "dense" => {
            store.insert("x", init::kaiming((3, 4, 1, 1), 1, &mut rng), true)?;
            store.insert("w", init::kaiming((2, 4, 1, 1), 4, &mut rng), true)?;
            store.insert("b", init::kaiming((1, 2, 1, 1), 1, &mut rng), true)?;
        }
        "se_scale" => {
            store.insert("x", init::kaiming((2, 4, 5, 5), 1, &mut rng), true)?;
            store.insert("w1", init::kaiming((2, 4, 1, 1), 4, &mut rng), true)?;
            store.insert("b1", init::kaiming((1, 2, 1, 1), 1, &mut rng), true)?;
            store.insert("w2", init::kaiming((4, 2, 1, 1), 2, &mut rng), true)?;
            store.insert("b2", init::kaiming((1, 4, 1, 1), 1, &mut rng), true)?;
        }
        other => unreachable!("unknown layer kind {other}"),
    }
    Ok(store)
}

/// Finite-difference checks for every layer type in the substrate.
pub fn layer_reports(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    out.push(check_layer(
        "conv2d",
        |tape, store| {
            let x = tape.param(store, "x")?;
            let k = tape.param(store, "k")?;
            let b = tape.param(store, "b")?;
            tape.conv2d(x, k, b)
        },
        seed,
    )?);
    out.push(check_layer(
        "batchnorm_train",
        |tape, store| {
            let x = tape.param(store, "x")?;
            let g = tape.param(store, "gamma")?;
            let b = tape.param(store, "beta")?;
            let (y, _) = tape.batchnorm_train(x, g, b, 1e-5)?;
            Ok(y)
        },
        seed + 1,
    )?);
    out.push(check_layer(
        "batchnorm_eval",
        |tape, store| {
            let x = tape.param(store, "x")?;
            let g = tape.param(store, "gamma")?;
            let b = tape.param(store, "beta")?;
            let rm = Array4::from_elem((1, 2, 1, 1), 0.1);
            let rv = Array4::from_elem((1, 2, 1, 1), 0.9);
            tape.batchnorm_eval(x, g, b, &rm, &rv, 1e-5)
        },
        seed + 2,
    )?);
    out.push(check_layer(
        "relu",
        |tape, store| {
            let x = tape.param(store, "x")?;
            Ok(tape.relu(x))
        },
        seed + 3,
    )?);
    out.push(check_layer(
        "sigmoid",
        |tape, store| {
            let x = tape.param(store, "x")?;
            Ok(tape.sigmoid(x))
        },
        seed + 4,
    )?);
    out.push(check_layer(
        "global_avg_pool",
        |tape, store| {
            let x = tape.param(store, "x")?;
            tape.global_avg_pool(x)
        },
        seed + 5,
    )?);
    out.push(check_layer(
        "dense",
        |tape, store| {
            let x = tape.param(store, "x")?;
            let w = tape.param(store, "w")?;
            let b = tape.param(store, "b")?;
            tape.dense(x, w, b)
        },
        seed + 6,
    )?);
    out.push(check_layer(
        "se_scale",
        |tape, store| {
            let x = tape.param(store, "x")?;
            let squeezed = tape.global_avg_pool(x)?;
            let w1 = tape.param(store, "w1")?;
            let b1 = tape.param(store, "b1")?;
            let h = tape.dense(squeezed, w1, b1)?;
            let h = tape.relu(h);
            let w2 = tape.param(store, "w2")?;
            let b2 = tape.param(store, "b2")?;
            let e = tape.dense(h, w2, b2)?;
            let s = tape.sigmoid(e);
            tape.channel_scale(x, s)
        },
        seed + 7,
    )?);
    Ok(out)
}

/// Check the full unfolded model end to end through the training loss
/// (sigmoid head, soft-IoU + fidelity) on a small input.
pub fn full_model_report(
    config: &ModelConfig,
    spatial: (usize, usize),
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let net = UnfoldedNet::new(*config)?;
    let mut store = net.init_params::<f64>(seed)?;
    // Move the checked instance into generic position: random projection
    // weights so every path carries signal, and small random biases so no
    // ReLU input sits exactly on its kink (zero biases put dead-window conv
    // outputs exactly at 0, where central differences see slope 1/2 while
    // the subgradient convention says 0).
    let mut rng = rng_for(seed, "gradcheck-proj", 0);
    let proj_names: Vec<String> = store
        .iter()
        .filter(|p| p.name.ends_with("proj.weight"))
        .map(|p| p.name.clone())
        .collect();
    for name in proj_names {
        let shape = store.value(&name)?.dim();
        store.set_value(&name, init::kaiming(shape, shape.1 * 9, &mut rng))?;
    }
    let bias_names: Vec<String> = store
        .iter()
        .filter(|p| p.trainable && p.name.ends_with(".bias"))
        .map(|p| p.name.clone())
        .collect();
    for name in bias_names {
        let shape = store.value(&name)?.dim();
        let bias = Array4::from_shape_simple_fn(shape, || rng.gen_range(-0.05..0.05));
        store.set_value(&name, bias)?;
    }
    let (h, w) = spatial;
    let mut data_rng = rng_for(seed, "gradcheck-data", 0);
    let image = Array4::from_shape_simple_fn((2, 1, h, w), || data_rng.gen_range(0.0..1.0));
    let gt = Array4::from_shape_simple_fn((2, 1, h, w), || f64::from(data_rng.gen_bool(0.15)));
    store.insert("input", image, true)?;

    grad_check(
        &mut store,
        |store, with_grad| {
            let mut tape = Tape::new();
            let input = tape.param(store, "input")?;
            let gt_v = tape.leaf(gt.clone());
            let mut bn_updates = Vec::new();
            let out = net.forward(&mut tape, store, input, Phase::Train, false, &mut bn_updates)?;
            let pred = tape.sigmoid(out.target);
            let (total, _, _) = total_loss_tape(&mut tape, pred, gt_v, out.recon, input, 0.01)?;
            let v = tape.value(total)[(0, 0, 0, 0)];
            if with_grad {
                tape.backward(total)?;
                tape.accumulate_param_grads(store);
            }
            Ok(v)
        },
        samples_per_param,
        DEFAULT_STEP,
        seed,
    )
}
