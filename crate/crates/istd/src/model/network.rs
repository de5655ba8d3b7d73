use ndarray::Array4;

use crate::error::{Error, Result};
use crate::model::blocks::{BnUpdate, ConvGroup, Phase};
use crate::model::{ModelConfig, ModuleKind, MIXING_DELTA, MIXING_GAMMA};
use crate::nn::{init, rng_for, ParamStore, Scalar, Tape, Var};

/// Tape handles of one stage's refined planes.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub background: Var,
    pub target: Var,
    pub noise: Var,
    pub recon: Var,
}

/// Extracted copies of one stage's planes, for decomposition dumps.
#[derive(Debug, Clone)]
pub struct StagePlanes<F> {
    pub stage_index: usize,
    pub background: Array4<F>,
    pub target: Array4<F>,
    pub noise: Array4<F>,
    pub recon: Array4<F>,
}

/// Result of a full forward pass. `target`/`recon` are the final stage's
/// planes; `stages` keeps every stage's handles and `trace` holds plane
/// copies when requested.
#[derive(Debug)]
pub struct ForwardOutput<F> {
    pub target: Var,
    pub recon: Var,
    pub stages: Vec<StageVars>,
    pub trace: Option<Vec<StagePlanes<F>>>,
}

/// The unfolded decomposition network. The struct holds only structure;
/// parameters live in a [`ParamStore`] keyed by stable names
/// (`stage{k}.{module}.{layer}.{field}`).
#[derive(Debug, Clone)]
pub struct UnfoldedNet {
    config: ModelConfig,
}

impl UnfoldedNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(UnfoldedNet { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Layer plan of one module at one stage.
    pub fn group(&self, stage: usize, module: ModuleKind) -> ConvGroup {
        let prefix = format!("stage{stage}.{}", module.name());
        match module {
            ModuleKind::Sebem => {
                ConvGroup::residual(&prefix, &self.config, true, self.config.se.sebem)
            }
            // no batchnorm anywhere in the gradient networks
            ModuleKind::Setem => {
                ConvGroup::residual(&prefix, &self.config, false, self.config.se.setem)
            }
            ModuleKind::Senrm => {
                ConvGroup::residual(&prefix, &self.config, false, self.config.se.senrm)
            }
            ModuleKind::Seirm => {
                ConvGroup::reconstruction(&prefix, &self.config, self.config.se.seirm)
            }
        }
    }

    fn epsilon_name(stage: usize) -> String {
        format!("stage{stage}.setem.epsilon")
    }

    fn sigma_name(stage: usize) -> String {
        format!("stage{stage}.senrm.sigma")
    }

    /// Build a freshly initialized parameter store for this configuration.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> Result<ParamStore<F>> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "model-init", 0);
        for stage in 0..self.config.stages {
            for module in [
                ModuleKind::Sebem,
                ModuleKind::Setem,
                ModuleKind::Senrm,
                ModuleKind::Seirm,
            ] {
                self.group(stage, module).register(&mut store, &mut rng)?;
            }
            store.insert(
                &Self::epsilon_name(stage),
                init::full((1, 1, 1, 1), MIXING_GAMMA),
                true,
            )?;
            store.insert(
                &Self::sigma_name(stage),
                init::full((1, 1, 1, 1), MIXING_DELTA),
                true,
            )?;
        }
        Ok(store)
    }

    /// Background estimation: `R = D - T - N`, `B = R + W(R)` with the
    /// residual branch `W` given by this stage's SEBEM conv group.
    #[allow(clippy::too_many_arguments)]
    pub fn sebem_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stage: usize,
        recon: Var,
        target: Var,
        noise: Var,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<Var> {
        let r = tape.sub(recon, target)?;
        let r = tape.sub(r, noise)?;
        let branch = self
            .group(stage, ModuleKind::Sebem)
            .forward(tape, store, r, phase, bn_updates)?;
        tape.add(r, branch)
    }

    /// Target extraction: `U = T + D - B' - N`, `T' = U - eps * H(U)` where
    /// `H` is the learned gradient network (no batchnorm).
    #[allow(clippy::too_many_arguments)]
    pub fn setem_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stage: usize,
        recon: Var,
        target: Var,
        noise: Var,
        background_next: Var,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<Var> {
        let u = tape.add(target, recon)?;
        let u = tape.sub(u, background_next)?;
        let u = tape.sub(u, noise)?;
        let grad = self
            .group(stage, ModuleKind::Setem)
            .forward(tape, store, u, phase, bn_updates)?;
        let eps = tape.param(store, &Self::epsilon_name(stage))?;
        let step = tape.scale_by(grad, eps)?;
        tape.sub(u, step)
    }

    /// Noise reduction: `V = N + D - B' - T'`, `N' = V - sigma * F(V)`;
    /// structurally identical to SETEM with independent parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn senrm_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stage: usize,
        recon: Var,
        noise: Var,
        background_next: Var,
        target_next: Var,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<Var> {
        let v = tape.add(noise, recon)?;
        let v = tape.sub(v, background_next)?;
        let v = tape.sub(v, target_next)?;
        let grad = self
            .group(stage, ModuleKind::Senrm)
            .forward(tape, store, v, phase, bn_updates)?;
        let sigma = tape.param(store, &Self::sigma_name(stage))?;
        let step = tape.scale_by(grad, sigma)?;
        tape.sub(v, step)
    }

    /// Image reconstruction: `D' = M(B' + T' + N')`.
    #[allow(clippy::too_many_arguments)]
    pub fn seirm_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stage: usize,
        background_next: Var,
        target_next: Var,
        noise_next: Var,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<Var> {
        let s = tape.add(background_next, target_next)?;
        let s = tape.add(s, noise_next)?;
        self.group(stage, ModuleKind::Seirm)
            .forward(tape, store, s, phase, bn_updates)
    }

    /// One full stage in module order SEBEM, SETEM, SENRM, SEIRM.
    #[allow(clippy::too_many_arguments)]
    pub fn stage_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stage: usize,
        recon: Var,
        target: Var,
        noise: Var,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<StageVars> {
        let background = self.sebem_forward(tape, store, stage, recon, target, noise, phase, bn_updates)?;
        let target_next =
            self.setem_forward(tape, store, stage, recon, target, noise, background, phase, bn_updates)?;
        let noise_next = self.senrm_forward(
            tape, store, stage, recon, noise, background, target_next, phase, bn_updates,
        )?;
        let recon_next =
            self.seirm_forward(tape, store, stage, background, target_next, noise_next, phase, bn_updates)?;
        Ok(StageVars {
            background,
            target: target_next,
            noise: noise_next,
            recon: recon_next,
        })
    }

    /// Full forward pass from an input image batch `(B, 1, H, W)`.
    ///
    /// The initial state attributes everything to the reconstruction:
    /// `D0 = image`, `T0 = 0`, `N0 = 0`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        image: Var,
        phase: Phase,
        keep_trace: bool,
        bn_updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<ForwardOutput<F>> {
        let dim = tape.value(image).raw_dim();
        if dim[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                axis: "channel",
                expected: 1,
                actual: dim[1],
            });
        }
        let zero = tape.leaf(Array4::zeros(dim));
        let mut recon = image;
        let mut target = zero;
        let mut noise = zero;
        let mut stages = Vec::with_capacity(self.config.stages);
        for stage in 0..self.config.stages {
            let s = self.stage_forward(tape, store, stage, recon, target, noise, phase, bn_updates)?;
            recon = s.recon;
            target = s.target;
            noise = s.noise;
            stages.push(s);
        }
        let trace = keep_trace.then(|| {
            stages
                .iter()
                .enumerate()
                .map(|(i, s)| StagePlanes {
                    stage_index: i + 1,
                    background: tape.value(s.background).clone(),
                    target: tape.value(s.target).clone(),
                    noise: tape.value(s.noise).clone(),
                    recon: tape.value(s.recon).clone(),
                })
                .collect()
        });
        Ok(ForwardOutput {
            target,
            recon,
            stages,
            trace,
        })
    }

    /// Exact number of trainable scalars for a configuration, computed by
    /// walking the layer plans. Linear in the stage count by construction.
    pub fn count_parameters(config: &ModelConfig) -> usize {
        let net = UnfoldedNet {
            config: *config,
        };
        let per_stage: usize = [
            ModuleKind::Sebem,
            ModuleKind::Setem,
            ModuleKind::Senrm,
            ModuleKind::Seirm,
        ]
        .iter()
        .map(|&m| net.group(0, m).param_count())
        .sum::<usize>()
            + 2; // the per-stage epsilon and sigma scalars
        per_stage * config.stages
    }
}
