//! Run configuration: a flat UTF-8 `key=value` file format mirroring
//! [`RunConfig`], hand-parsed so any tool can read and write it. CLI flags
//! override file values; unknown keys are usage errors.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::LossConfig;
use crate::model::{ModelConfig, SeFlags};
use crate::scene::{NoiseKind, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Decompose,
    Sweep,
    Synth,
    GradCheck,
    Baseline,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        Ok(match s {
            "train" => Mode::Train,
            "eval" => Mode::Eval,
            "decompose" => Mode::Decompose,
            "sweep" => Mode::Sweep,
            "synth" => Mode::Synth,
            "gradcheck" => Mode::GradCheck,
            "baseline" => Mode::Baseline,
            other => {
                return Err(Error::InvalidConfig(format!("unknown mode `{other}`")));
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Decompose => "decompose",
            Mode::Sweep => "sweep",
            Mode::Synth => "synth",
            Mode::GradCheck => "gradcheck",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        // desk-scale epoch default; the full-scale protocol is one flag away
        OptimizerConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 50,
        }
    }
}

/// Synthetic data source: `count` scenes drawn from a base scene recipe with
/// per-sample seeds derived from the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub scene: SceneConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 200,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    Synthetic(SynthSpec),
}

/// Optional overrides of the classical solver defaults used by the baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RpcaOverrides {
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub data: Option<DataSource>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub val_fraction: f64,
    pub val_every: usize,
    pub match_radius: f64,
    /// Trained checkpoint consumed by eval/decompose/sweep.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to resume training from.
    pub resume: Option<PathBuf>,
    pub sweep_protocol: NoiseKind,
    /// Override of the default per-protocol noise grids.
    pub sweep_levels: Option<Vec<f64>>,
    pub decompose_image: Option<PathBuf>,
    pub rpca: RpcaOverrides,
    pub lipschitz_probes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Train,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: None,
            seed: 0,
            output_dir: PathBuf::from("runs/out"),
            val_fraction: 0.2,
            val_every: 5,
            match_radius: 3.0,
            checkpoint: None,
            resume: None,
            sweep_protocol: NoiseKind::Gaussian,
            sweep_levels: None,
            decompose_image: None,
            rpca: RpcaOverrides::default(),
            lipschitz_probes: 16,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::InvalidConfig(format!(
            "key `{key}`: expected a boolean, got `{other}`"
        ))),
    }
}

impl RunConfig {
    fn synth_mut(&mut self) -> Result<&mut SynthSpec> {
        match &mut self.data {
            Some(DataSource::Synthetic(s)) => Ok(s),
            Some(DataSource::Directory(_)) => Err(Error::InvalidConfig(
                "config sets both data.dir and data.synth.* keys; exactly one data source is allowed"
                    .into(),
            )),
            none => {
                *none = Some(DataSource::Synthetic(SynthSpec::default()));
                match none {
                    Some(DataSource::Synthetic(s)) => Ok(s),
                    _ => unreachable!(),
                }
            }
        }
    }

    /// Apply one `key=value` pair.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out" => self.output_dir = PathBuf::from(value),
            "model.stages" => self.model.stages = parse_num(key, value)?,
            "model.bottleneck_channels" => self.model.bottleneck_channels = parse_num(key, value)?,
            "model.channels" => self.model.channels = parse_num(key, value)?,
            "model.n_fill" => self.model.n_fill = parse_num(key, value)?,
            "model.recon_layers" => self.model.recon_layers = parse_num(key, value)?,
            "model.se_ratio" => self.model.se_ratio = parse_num(key, value)?,
            "model.se.sebem" => self.model.se.sebem = parse_bool(key, value)?,
            "model.se.setem" => self.model.se.setem = parse_bool(key, value)?,
            "model.se.senrm" => self.model.se.senrm = parse_bool(key, value)?,
            "model.se.seirm" => self.model.se.seirm = parse_bool(key, value)?,
            "loss.eta" => self.loss.eta = parse_num(key, value)?,
            "loss.threshold" => self.loss.binarize_threshold = parse_num(key, value)?,
            "opt.lr" => self.optimizer.lr = parse_num(key, value)?,
            "opt.batch_size" => self.optimizer.batch_size = parse_num(key, value)?,
            "opt.epochs" => self.optimizer.epochs = parse_num(key, value)?,
            "data.dir" => {
                if matches!(self.data, Some(DataSource::Synthetic(_))) {
                    return Err(Error::InvalidConfig(
                        "config sets both data.dir and data.synth.* keys; exactly one data source is allowed".into(),
                    ));
                }
                self.data = Some(DataSource::Directory(PathBuf::from(value)));
            }
            "data.synth.count" => self.synth_mut()?.count = parse_num(key, value)?,
            "data.synth.height" => self.synth_mut()?.scene.height = parse_num(key, value)?,
            "data.synth.width" => self.synth_mut()?.scene.width = parse_num(key, value)?,
            "data.synth.rank" => self.synth_mut()?.scene.background_rank = parse_num(key, value)?,
            "data.synth.scale" => self.synth_mut()?.scene.background_scale = parse_num(key, value)?,
            "data.synth.targets" => self.synth_mut()?.scene.target_count = parse_num(key, value)?,
            "data.synth.amp_lo" => self.synth_mut()?.scene.target_amplitude.0 = parse_num(key, value)?,
            "data.synth.amp_hi" => self.synth_mut()?.scene.target_amplitude.1 = parse_num(key, value)?,
            "data.synth.sigma_lo" => self.synth_mut()?.scene.target_sigma.0 = parse_num(key, value)?,
            "data.synth.sigma_hi" => self.synth_mut()?.scene.target_sigma.1 = parse_num(key, value)?,
            "val.fraction" => self.val_fraction = parse_num(key, value)?,
            "val.every" => self.val_every = parse_num(key, value)?,
            "match_radius" => self.match_radius = parse_num(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "resume" => self.resume = Some(PathBuf::from(value)),
            "sweep.protocol" => {
                self.sweep_protocol = match value {
                    "gaussian" => NoiseKind::Gaussian,
                    "salt_pepper" => NoiseKind::SaltPepper,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "sweep.protocol must be gaussian or salt_pepper, got `{other}`"
                        )))
                    }
                }
            }
            "sweep.levels" => {
                let levels = value
                    .split(',')
                    .map(|v| parse_num::<f64>(key, v.trim()))
                    .collect::<Result<Vec<f64>>>()?;
                self.sweep_levels = Some(levels);
            }
            "decompose.image" => self.decompose_image = Some(PathBuf::from(value)),
            "rpca.lambda" => self.rpca.lambda = Some(parse_num(key, value)?),
            "rpca.mu" => self.rpca.mu = Some(parse_num(key, value)?),
            "rpca.max_iters" => self.rpca.max_iters = Some(parse_num(key, value)?),
            "rpca.tol" => self.rpca.tol = Some(parse_num(key, value)?),
            "lipschitz.probes" => self.lipschitz_probes = parse_num(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Parse a config file body. Blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.optimizer.lr <= 0.0 || !self.optimizer.lr.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction {} outside [0,1)",
                self.val_fraction
            )));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidConfig("val.every must be at least 1".into()));
        }
        if let Some(DataSource::Synthetic(s)) = &self.data {
            s.scene.validate()?;
            if s.count == 0 {
                return Err(Error::InvalidConfig("data.synth.count must be positive".into()));
            }
        }
        Ok(())
    }

    /// Canonical serialization: every key in a fixed order. Parsing the
    /// output reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("mode", self.mode.name().to_string());
        push("seed", self.seed.to_string());
        push("out", self.output_dir.display().to_string());
        for (k, v) in model_kv(&self.model) {
            push(&k, v);
        }
        push("loss.eta", fmt_f64(self.loss.eta));
        push("loss.threshold", fmt_f64(self.loss.binarize_threshold));
        push("opt.lr", fmt_f64(self.optimizer.lr));
        push("opt.batch_size", self.optimizer.batch_size.to_string());
        push("opt.epochs", self.optimizer.epochs.to_string());
        match &self.data {
            Some(DataSource::Directory(p)) => push("data.dir", p.display().to_string()),
            Some(DataSource::Synthetic(s)) => {
                push("data.synth.count", s.count.to_string());
                push("data.synth.height", s.scene.height.to_string());
                push("data.synth.width", s.scene.width.to_string());
                push("data.synth.rank", s.scene.background_rank.to_string());
                push("data.synth.scale", fmt_f64(s.scene.background_scale));
                push("data.synth.targets", s.scene.target_count.to_string());
                push("data.synth.amp_lo", fmt_f64(s.scene.target_amplitude.0));
                push("data.synth.amp_hi", fmt_f64(s.scene.target_amplitude.1));
                push("data.synth.sigma_lo", fmt_f64(s.scene.target_sigma.0));
                push("data.synth.sigma_hi", fmt_f64(s.scene.target_sigma.1));
            }
            None => {}
        }
        push("val.fraction", fmt_f64(self.val_fraction));
        push("val.every", self.val_every.to_string());
        push("match_radius", fmt_f64(self.match_radius));
        if let Some(p) = &self.checkpoint {
            push("checkpoint", p.display().to_string());
        }
        if let Some(p) = &self.resume {
            push("resume", p.display().to_string());
        }
        push(
            "sweep.protocol",
            match self.sweep_protocol {
                NoiseKind::Gaussian => "gaussian".into(),
                NoiseKind::SaltPepper => "salt_pepper".into(),
            },
        );
        if let Some(levels) = &self.sweep_levels {
            let joined = levels.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",");
            push("sweep.levels", joined);
        }
        if let Some(p) = &self.decompose_image {
            push("decompose.image", p.display().to_string());
        }
        if let Some(v) = self.rpca.lambda {
            push("rpca.lambda", fmt_f64(v));
        }
        if let Some(v) = self.rpca.mu {
            push("rpca.mu", fmt_f64(v));
        }
        if let Some(v) = self.rpca.max_iters {
            push("rpca.max_iters", v.to_string());
        }
        if let Some(v) = self.rpca.tol {
            push("rpca.tol", fmt_f64(v));
        }
        push("lipschitz.probes", self.lipschitz_probes.to_string());
        out
    }
}

/// Shortest-roundtrip float formatting; parsing gives back the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Canonical `key=value` pairs of just the model section, used for the
/// checkpoint compatibility hash.
pub fn model_kv(model: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("model.stages".into(), model.stages.to_string()),
        (
            "model.bottleneck_channels".into(),
            model.bottleneck_channels.to_string(),
        ),
        ("model.channels".into(), model.channels.to_string()),
        ("model.n_fill".into(), model.n_fill.to_string()),
        ("model.recon_layers".into(), model.recon_layers.to_string()),
        ("model.se_ratio".into(), model.se_ratio.to_string()),
        ("model.se.sebem".into(), model.se.sebem.to_string()),
        ("model.se.setem".into(), model.se.setem.to_string()),
        ("model.se.senrm".into(), model.se.senrm.to_string()),
        ("model.se.seirm".into(), model.se.seirm.to_string()),
    ]
}

pub fn model_canonical_text(model: &ModelConfig) -> String {
    model_kv(model)
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Parse a model section serialized by [`model_canonical_text`].
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut model = ModelConfig {
        se: SeFlags::default(),
        ..ModelConfig::default()
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Checkpoint(format!("bad model config line `{line}`")));
        };
        match key {
            "model.stages" => model.stages = parse_num(key, value)?,
            "model.bottleneck_channels" => model.bottleneck_channels = parse_num(key, value)?,
            "model.channels" => model.channels = parse_num(key, value)?,
            "model.n_fill" => model.n_fill = parse_num(key, value)?,
            "model.recon_layers" => model.recon_layers = parse_num(key, value)?,
            "model.se_ratio" => model.se_ratio = parse_num(key, value)?,
            "model.se.sebem" => model.se.sebem = parse_bool(key, value)?,
            "model.se.setem" => model.se.setem = parse_bool(key, value)?,
            "model.se.senrm" => model.se.senrm = parse_bool(key, value)?,
            "model.se.seirm" => model.se.seirm = parse_bool(key, value)?,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown model config key `{other}` in checkpoint"
                )))
            }
        }
    }
    Ok(model)
}

/// FNV-1a over a string, the checkpoint's config-compatibility hash.
pub fn fnv64(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "mode=sweep\nseed=9\nmodel.stages=3\ndata.synth.count=12\nsweep.levels=0,5,10\n",
        )
        .unwrap();
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::from_text("# a comment\n\nseed=4\n").unwrap();
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = RunConfig::from_text("nonsense=1\n").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn both_data_sources_is_an_error() {
        assert!(RunConfig::from_text("data.dir=x\ndata.synth.count=3\n").is_err());
        assert!(RunConfig::from_text("data.synth.count=3\ndata.dir=x\n").is_err());
    }

    #[test]
    fn later_values_override_earlier_ones() {
        let cfg = RunConfig::from_text("seed=1\nseed=2\n").unwrap();
        assert_eq!(cfg.seed, 2);
    }

    #[test]
    fn model_hash_is_sensitive_to_structure() {
        let a = ModelConfig::default();
        let mut b = a;
        b.stages = 5;
        assert_ne!(
            fnv64(&model_canonical_text(&a)),
            fnv64(&model_canonical_text(&b))
        );
        let back = model_from_text(&model_canonical_text(&a)).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.optimizer.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.val_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }
}
