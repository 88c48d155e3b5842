//! Line-oriented `key = value` run configuration with dotted namespaces.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors.

use crate::data::{Generator, SyntheticDatasetSpec};
use crate::pmim::MaskingMode;
use crate::space::SpaceConfig;
use crate::trainer::TrainConfig;
use crate::vit::ToyViTConfig;
use crate::{Error, Result};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub generator: Generator,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = SyntheticDatasetSpec::default();
        Self {
            n_train: d.n_train,
            n_eval: d.n_eval,
            generator: d.generator,
            noise_sigma: d.noise_sigma,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ToyViTConfig,
    pub space: SpaceConfig,
    pub data: DataConfig,
    pub trainer: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ToyViTConfig::default(),
            space: SpaceConfig::default(),
            data: DataConfig::default(),
            trainer: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_mode(key: &str, v: &str) -> Result<MaskingMode> {
    match v {
        "progressive" => Ok(MaskingMode::Progressive),
        "constant" => Ok(MaskingMode::Constant),
        "none" => Ok(MaskingMode::None),
        _ => Err(Error::Config(format!("{key}: expected progressive | constant | none, got {v:?}"))),
    }
}

fn mode_name(m: MaskingMode) -> &'static str {
    match m {
        MaskingMode::Progressive => "progressive",
        MaskingMode::Constant => "constant",
        MaskingMode::None => "none",
    }
}

fn generator_name(g: Generator) -> &'static str {
    match g {
        Generator::GaussianBlobs => "gaussian-blobs",
        Generator::StripedTextures => "striped-textures",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("{k}: set more than once (line {})", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.trainer;
        match k {
            "model.image_size" => m.image_size = parse_value(k, v)?,
            "model.patch_size" => m.patch_size = parse_value(k, v)?,
            "model.channels" => m.channels = parse_value(k, v)?,
            "model.embed_dim" => m.embed_dim = parse_value(k, v)?,
            "model.depth" => m.depth = parse_value(k, v)?,
            "model.heads" => m.heads = parse_value(k, v)?,
            "model.head_dim" => m.head_dim = parse_value(k, v)?,
            "model.mlp_dim" => m.mlp_dim = parse_value(k, v)?,
            "model.classes" => m.classes = parse_value(k, v)?,
            "space.qkv_lo" => self.space.qkv.lo = parse_value(k, v)?,
            "space.qkv_step" => self.space.qkv.step = parse_value(k, v)?,
            "space.mlp_lo" => self.space.mlp.lo = parse_value(k, v)?,
            "space.mlp_step" => self.space.mlp.step = parse_value(k, v)?,
            "space.embed_lo" => self.space.embed.lo = parse_value(k, v)?,
            "space.embed_step" => self.space.embed.step = parse_value(k, v)?,
            "space.heads_lo" => self.space.heads.lo = parse_value(k, v)?,
            "space.heads_step" => self.space.heads.step = parse_value(k, v)?,
            "data.n_train" => self.data.n_train = parse_value(k, v)?,
            "data.n_eval" => self.data.n_eval = parse_value(k, v)?,
            "data.generator" => self.data.generator = parse_value(k, v)?,
            "data.noise_sigma" => self.data.noise_sigma = parse_value(k, v)?,
            "data.seed" => self.data.seed = parse_value(k, v)?,
            "trainer.pretrain_epochs" => t.pretrain_epochs = parse_value(k, v)?,
            "trainer.epochs" => t.epochs = parse_value(k, v)?,
            "trainer.warmup_epochs" => t.warmup_epochs = Some(parse_value(k, v)?),
            "trainer.retrain_epochs" => t.retrain_epochs = parse_value(k, v)?,
            "trainer.batch_size" => t.batch_size = parse_value(k, v)?,
            "trainer.lr_main" => t.lr_main = parse_value(k, v)?,
            "trainer.lr_score" => t.lr_score = parse_value(k, v)?,
            "trainer.beta1_score" => t.beta1_score = parse_value(k, v)?,
            "trainer.weight_decay" => t.weight_decay = parse_value(k, v)?,
            "trainer.tau" => t.tau = parse_value(k, v)?,
            "trainer.finish_tol" => t.finish_tol = parse_value(k, v)?,
            "trainer.init_std" => t.init_std = parse_value(k, v)?,
            "trainer.freeze_alpha_warmup" => t.freeze_alpha_warmup = parse_value(k, v)?,
            "trainer.seed" => t.seed = parse_value(k, v)?,
            "reg.mu1" => t.reg.mu1 = parse_value(k, v)?,
            "reg.mu2" => t.reg.mu2 = parse_value(k, v)?,
            "reg.mu3" => t.reg.mu3 = parse_value(k, v)?,
            "reg.eta" => t.reg.eta = parse_value(k, v)?,
            "reg.budget_huber" => t.reg.budget_huber = parse_value(k, v)?,
            "reg.budget_slack" => t.reg.budget_slack = parse_value(k, v)?,
            "pmim.mode" => t.masking = parse_mode(k, v)?,
            "pmim.gamma_start" => t.gamma_start = parse_value(k, v)?,
            "pmim.gamma_end" => t.gamma_end = parse_value(k, v)?,
            "pmim.rec_after_finish" => t.rec_after_finish = parse_value(k, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        crate::space::SearchSpace::build(&self.model, &self.space)?;
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return Err(Error::Config("data.n_train and data.n_eval must be positive".into()));
        }
        if self.data.n_train % self.model.classes != 0 || self.data.n_eval % self.model.classes != 0 {
            return Err(Error::Config(format!(
                "data.n_train / data.n_eval must be multiples of model.classes {}",
                self.model.classes
            )));
        }
        if !(self.data.noise_sigma >= 0.0) {
            return Err(Error::Config("data.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            n_train: self.data.n_train,
            n_eval: self.data.n_eval,
            classes: self.model.classes,
            image_size: self.model.image_size,
            channels: self.model.channels,
            generator: self.data.generator,
            noise_sigma: self.data.noise_sigma,
            seed: self.data.seed,
        }
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn snapshot(&self) -> String {
        let m = &self.model;
        let t = &self.trainer;
        let s = &self.space;
        let mut o = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        w("model.image_size", m.image_size.to_string());
        w("model.patch_size", m.patch_size.to_string());
        w("model.channels", m.channels.to_string());
        w("model.embed_dim", m.embed_dim.to_string());
        w("model.depth", m.depth.to_string());
        w("model.heads", m.heads.to_string());
        w("model.head_dim", m.head_dim.to_string());
        w("model.mlp_dim", m.mlp_dim.to_string());
        w("model.classes", m.classes.to_string());
        w("space.qkv_lo", s.qkv.lo.to_string());
        w("space.qkv_step", s.qkv.step.to_string());
        w("space.mlp_lo", s.mlp.lo.to_string());
        w("space.mlp_step", s.mlp.step.to_string());
        w("space.embed_lo", s.embed.lo.to_string());
        w("space.embed_step", s.embed.step.to_string());
        w("space.heads_lo", s.heads.lo.to_string());
        w("space.heads_step", s.heads.step.to_string());
        w("data.n_train", self.data.n_train.to_string());
        w("data.n_eval", self.data.n_eval.to_string());
        w("data.generator", generator_name(self.data.generator).into());
        w("data.noise_sigma", self.data.noise_sigma.to_string());
        w("data.seed", self.data.seed.to_string());
        w("trainer.pretrain_epochs", t.pretrain_epochs.to_string());
        w("trainer.epochs", t.epochs.to_string());
        w("trainer.warmup_epochs", t.warmup().to_string());
        w("trainer.retrain_epochs", t.retrain_epochs.to_string());
        w("trainer.batch_size", t.batch_size.to_string());
        w("trainer.lr_main", t.lr_main.to_string());
        w("trainer.lr_score", t.lr_score.to_string());
        w("trainer.beta1_score", t.beta1_score.to_string());
        w("trainer.weight_decay", t.weight_decay.to_string());
        w("trainer.tau", t.tau.to_string());
        w("trainer.finish_tol", t.finish_tol.to_string());
        w("trainer.init_std", t.init_std.to_string());
        w("trainer.freeze_alpha_warmup", t.freeze_alpha_warmup.to_string());
        w("trainer.seed", t.seed.to_string());
        w("reg.mu1", t.reg.mu1.to_string());
        w("reg.mu2", t.reg.mu2.to_string());
        w("reg.mu3", t.reg.mu3.to_string());
        w("reg.eta", t.reg.eta.to_string());
        w("reg.budget_huber", t.reg.budget_huber.to_string());
        w("reg.budget_slack", t.reg.budget_slack.to_string());
        w("pmim.mode", mode_name(t.masking).into());
        w("pmim.gamma_start", t.gamma_start.to_string());
        w("pmim.gamma_end", t.gamma_end.to_string());
        w("pmim.rec_after_finish", t.rec_after_finish.to_string());
        w("output.dir", self.output_dir.display().to_string());
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut c = RunConfig::parse("trainer.tau = 0.3\n# note\npmim.mode = constant\n").unwrap();
        assert_eq!(c.trainer.tau, 0.3);
        let back = RunConfig::parse(&c.snapshot()).unwrap();
        c.trainer.warmup_epochs = Some(c.trainer.warmup());
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse("trainer.tua = 0.3").unwrap_err().to_string();
        assert!(e.contains("trainer.tua"), "{e}");
        let e = RunConfig::parse("trainer.tau = x").unwrap_err().to_string();
        assert!(e.contains("trainer.tau"), "{e}");
        let e = RunConfig::parse("trainer.tau = 1.5").unwrap_err().to_string();
        assert!(e.contains("trainer.tau"), "{e}");
        assert!(RunConfig::parse("a.b = 1\na.b = 1").is_err());
    }
}
