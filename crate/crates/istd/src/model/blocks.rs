//! Convolution-group plans shared by the four stage modules.
//!
//! A [`ConvGroup`] is a declarative layer list; the same plan drives parameter
//! registration, the forward pass, and parameter counting, so the three can
//! never drift apart.

use rand::Rng;

use crate::error::Result;
use crate::model::{ModelConfig, BN_EPS};
use crate::nn::{init, BatchStats, ParamStore, Scalar, Tape, Var};

/// Train/eval switch: train-mode batchnorm uses batch statistics and reports
/// running-buffer updates, eval mode is a deterministic affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Pending running-statistics update from one train-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BnUpdate<F> {
    pub mean_name: String,
    pub var_name: String,
    pub stats: BatchStats<F>,
}

/// Fold pending batch statistics into the running buffers:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<F: Scalar>(
    store: &mut ParamStore<F>,
    updates: Vec<BnUpdate<F>>,
    momentum: f64,
) -> Result<()> {
    let m = F::from_f64(momentum);
    let one = F::one();
    for u in updates {
        let rm = store.get_mut(&u.mean_name)?;
        rm.value
            .zip_mut_with(&u.stats.mean, |r, &b| *r = (one - m) * *r + m * b);
        let rv = store.get_mut(&u.var_name)?;
        rv.value
            .zip_mut_with(&u.stats.var, |r, &b| *r = (one - m) * *r + m * b);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Block {
    Conv {
        name: String,
        in_c: usize,
        out_c: usize,
        /// Zero-initialized final projections keep a freshly built stage on
        /// the exact identity algebra.
        zero_init: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    Se {
        name: String,
        channels: usize,
        hidden: usize,
    },
}

#[derive(Debug, Clone)]
pub struct ConvGroup {
    pub blocks: Vec<Block>,
}

impl ConvGroup {
    /// Residual/gradient group: conv(1->BC) -> conv(BC->C) -> n_fill x
    /// conv(C->C) -> SE -> conv(C->1), with batchnorm after every non-final
    /// convolution when `with_bn` holds. The gradient networks of SETEM and
    /// SENRM use `with_bn = false`: batchnorm's moving scale would break the
    /// Lipschitz continuity their derivation assumes.
    pub fn residual(prefix: &str, cfg: &ModelConfig, with_bn: bool, with_se: bool) -> ConvGroup {
        let bc = cfg.bottleneck_channels;
        let c = cfg.channels;
        let mut blocks = Vec::new();
        let mut conv_idx = 0usize;
        let mut push_conv = |blocks: &mut Vec<Block>, in_c: usize, out_c: usize| {
            blocks.push(Block::Conv {
                name: format!("{prefix}.conv{conv_idx}"),
                in_c,
                out_c,
                zero_init: false,
            });
            if with_bn {
                blocks.push(Block::BatchNorm {
                    name: format!("{prefix}.bn{conv_idx}"),
                    channels: out_c,
                });
            }
            blocks.push(Block::Relu);
            conv_idx += 1;
        };
        push_conv(&mut blocks, 1, bc);
        push_conv(&mut blocks, bc, c);
        for _ in 0..cfg.n_fill {
            push_conv(&mut blocks, c, c);
        }
        if with_se {
            blocks.push(Block::Se {
                name: format!("{prefix}.se"),
                channels: c,
                hidden: c / cfg.se_ratio,
            });
        }
        blocks.push(Block::Conv {
            name: format!("{prefix}.proj"),
            in_c: c,
            out_c: 1,
            zero_init: true,
        });
        ConvGroup { blocks }
    }

    /// Reconstruction group: conv(1->C) -> recon_layers x conv(C->C) -> SE ->
    /// conv(C->1), ReLU after every non-final convolution, no batchnorm.
    pub fn reconstruction(prefix: &str, cfg: &ModelConfig, with_se: bool) -> ConvGroup {
        let c = cfg.channels;
        let mut blocks = Vec::new();
        blocks.push(Block::Conv {
            name: format!("{prefix}.conv0"),
            in_c: 1,
            out_c: c,
            zero_init: false,
        });
        blocks.push(Block::Relu);
        for i in 0..cfg.recon_layers {
            blocks.push(Block::Conv {
                name: format!("{prefix}.conv{}", i + 1),
                in_c: c,
                out_c: c,
                zero_init: false,
            });
            blocks.push(Block::Relu);
        }
        if with_se {
            blocks.push(Block::Se {
                name: format!("{prefix}.se"),
                channels: c,
                hidden: c / cfg.se_ratio,
            });
        }
        blocks.push(Block::Conv {
            name: format!("{prefix}.proj"),
            in_c: c,
            out_c: 1,
            zero_init: true,
        });
        ConvGroup { blocks }
    }

    /// Register this group's parameters. Weights get Kaiming fan-in scaling,
    /// biases start at zero, batchnorm at identity.
    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        for block in &self.blocks {
            match block {
                Block::Conv {
                    name,
                    in_c,
                    out_c,
                    zero_init,
                } => {
                    let weight = if *zero_init {
                        init::zeros((*out_c, *in_c, 3, 3))
                    } else {
                        init::kaiming((*out_c, *in_c, 3, 3), in_c * 9, rng)
                    };
                    store.insert(&format!("{name}.weight"), weight, true)?;
                    store.insert(&format!("{name}.bias"), init::zeros((1, *out_c, 1, 1)), true)?;
                }
                Block::BatchNorm { name, channels } => {
                    store.insert(&format!("{name}.gamma"), init::full((1, *channels, 1, 1), 1.0), true)?;
                    store.insert(&format!("{name}.beta"), init::zeros((1, *channels, 1, 1)), true)?;
                    store.insert(
                        &format!("{name}.running_mean"),
                        init::zeros((1, *channels, 1, 1)),
                        false,
                    )?;
                    store.insert(
                        &format!("{name}.running_var"),
                        init::full((1, *channels, 1, 1), 1.0),
                        false,
                    )?;
                }
                Block::Relu => {}
                Block::Se {
                    name,
                    channels,
                    hidden,
                } => {
                    store.insert(
                        &format!("{name}.fc1.weight"),
                        init::kaiming((*hidden, *channels, 1, 1), *channels, rng),
                        true,
                    )?;
                    store.insert(&format!("{name}.fc1.bias"), init::zeros((1, *hidden, 1, 1)), true)?;
                    store.insert(
                        &format!("{name}.fc2.weight"),
                        init::kaiming((*channels, *hidden, 1, 1), *hidden, rng),
                        true,
                    )?;
                    store.insert(&format!("{name}.fc2.bias"), init::zeros((1, *channels, 1, 1)), true)?;
                }
            }
        }
        Ok(())
    }

    /// Trainable scalars in this group.
    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Conv { in_c, out_c, .. } => out_c * in_c * 9 + out_c,
                Block::BatchNorm { channels, .. } => 2 * channels,
                Block::Relu => 0,
                Block::Se {
                    channels, hidden, ..
                } => hidden * channels + hidden + channels * hidden + channels,
            })
            .sum()
    }

    /// Run the group on the tape.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        input: Var,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<Var> {
        let mut x = input;
        for block in &self.blocks {
            match block {
                Block::Conv { name, .. } => {
                    let w = tape.param(store, &format!("{name}.weight"))?;
                    let b = tape.param(store, &format!("{name}.bias"))?;
                    x = tape.conv2d(x, w, b)?;
                }
                Block::BatchNorm { name, .. } => {
                    let gamma = tape.param(store, &format!("{name}.gamma"))?;
                    let beta = tape.param(store, &format!("{name}.beta"))?;
                    match phase {
                        Phase::Train => {
                            let (y, stats) =
                                tape.batchnorm_train(x, gamma, beta, F::from_f64(BN_EPS))?;
                            bn_updates.push(BnUpdate {
                                mean_name: format!("{name}.running_mean"),
                                var_name: format!("{name}.running_var"),
                                stats,
                            });
                            x = y;
                        }
                        Phase::Eval => {
                            let rm = store.value(&format!("{name}.running_mean"))?.clone();
                            let rv = store.value(&format!("{name}.running_var"))?.clone();
                            x = tape.batchnorm_eval(x, gamma, beta, &rm, &rv, F::from_f64(BN_EPS))?;
                        }
                    }
                }
                Block::Relu => {
                    x = tape.relu(x);
                }
                Block::Se { name, .. } => {
                    x = se_forward(tape, store, name, x)?;
                }
            }
        }
        Ok(x)
    }
}

/// Squeeze-and-excitation: global average pooling per channel, a two-layer
/// gating network, then per-channel rescaling of the input.
pub fn se_forward<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    prefix: &str,
    features: Var,
) -> Result<Var> {
    let squeezed = tape.global_avg_pool(features)?;
    let w1 = tape.param(store, &format!("{prefix}.fc1.weight"))?;
    let b1 = tape.param(store, &format!("{prefix}.fc1.bias"))?;
    let h = tape.dense(squeezed, w1, b1)?;
    let h = tape.relu(h);
    let w2 = tape.param(store, &format!("{prefix}.fc2.weight"))?;
    let b2 = tape.param(store, &format!("{prefix}.fc2.bias"))?;
    let e = tape.dense(h, w2, b2)?;
    let scales = tape.sigmoid(e);
    tape.channel_scale(features, scales)
}
