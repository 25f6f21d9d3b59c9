//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{G2gError, Result};
use crate::gnn::{Activation, InteractorConfig, Variant};
use crate::pipeline::PipelineConfig;

/// Every knob of one protocol run. Feature dimensions `d_h` and `L` are not
/// here: they come from the dataset header (or `synth.*` when synthetic).
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub segments: usize,
    pub d_zeta: usize,
    pub mlp_hidden: Option<usize>,

    pub variant: Variant,
    pub d_xi: usize,
    pub activation: Activation,
    pub layers: Option<usize>,
    pub heads: usize,

    pub lambda: f64,
    pub eta: f64,

    pub epochs: usize,
    pub proto_iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Feed stored augmented views of exemplars into `L_C`.
    pub rehearsal_aug: bool,
    /// Noise scale of synthetic augmentation, relative to the feature RMS.
    pub aug_factor: f64,

    pub base_classes: usize,
    pub sessions: usize,
    pub ways: usize,
    pub shots: usize,
    /// Samples per base class; `None` uses all of them.
    pub base_shots: Option<usize>,

    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,

    pub synth: SynthConfig,
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub d_h: usize,
    pub tokens: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sigma: f64,
    pub aug_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_h: 64,
            tokens: 4,
            train_per_class: 20,
            test_per_class: 10,
            sigma: 0.1,
            aug_sigma: 0.05,
            seed: 7,
        }
    }
}

impl Default for Config {
    /// The desk-scale setup: 10 base classes and four 2-way 5-shot sessions
    /// on synthetic 64x4 features, `S = 8`, `d_ζ = d_ξ = 64`, GATv2.
    fn default() -> Self {
        Config {
            segments: 8,
            d_zeta: 64,
            mlp_hidden: None,
            variant: Variant::Gatv2,
            d_xi: 64,
            activation: Activation::Elu,
            layers: None,
            heads: 4,
            lambda: 0.1,
            eta: 0.1,
            epochs: 100,
            proto_iters: 20,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            seed: 0,
            rehearsal_aug: true,
            aug_factor: 0.05,
            base_classes: 10,
            sessions: 4,
            ways: 2,
            shots: 5,
            base_shots: None,
            train_path: None,
            test_path: None,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| G2gError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(G2gError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value.eq_ignore_ascii_case("all") || value.eq_ignore_ascii_case("default") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl Config {
    /// Parses config text over the defaults. Later lines win; unknown keys
    /// are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                G2gError::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. Does not re-validate.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "pipeline.S" => self.segments = parse(key, v)?,
            "pipeline.d_zeta" => self.d_zeta = parse(key, v)?,
            "pipeline.mlp_hidden" => self.mlp_hidden = parse_opt(key, v)?,
            "interactor.variant" => self.variant = v.parse()?,
            "interactor.d_xi" => self.d_xi = parse(key, v)?,
            "interactor.activation" => self.activation = v.parse()?,
            "interactor.layers" => self.layers = parse_opt(key, v)?,
            "interactor.heads" => self.heads = parse(key, v)?,
            "loss.lambda" => self.lambda = parse(key, v)?,
            "loss.eta" => self.eta = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.proto_iters" => self.proto_iters = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.beta1" => self.beta1 = parse(key, v)?,
            "train.beta2" => self.beta2 = parse(key, v)?,
            "train.eps" => self.adam_eps = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.rehearsal_aug" => self.rehearsal_aug = parse_bool(key, v)?,
            "train.aug_factor" => self.aug_factor = parse(key, v)?,
            "protocol.base_classes" => self.base_classes = parse(key, v)?,
            "protocol.sessions" => self.sessions = parse(key, v)?,
            "protocol.ways" => self.ways = parse(key, v)?,
            "protocol.shots" => self.shots = parse(key, v)?,
            "protocol.base_shots" => self.base_shots = parse_opt(key, v)?,
            "data.train_path" => self.train_path = Some(PathBuf::from(v)),
            "data.test_path" => self.test_path = Some(PathBuf::from(v)),
            "synth.d_h" => self.synth.d_h = parse(key, v)?,
            "synth.L" => self.synth.tokens = parse(key, v)?,
            "synth.train_per_class" => self.synth.train_per_class = parse(key, v)?,
            "synth.test_per_class" => self.synth.test_per_class = parse(key, v)?,
            "synth.sigma" => self.synth.sigma = parse(key, v)?,
            "synth.aug_sigma" => self.synth.aug_sigma = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            _ => return Err(G2gError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(G2gError::Config(m));
        if self.segments < 2 {
            return bad(format!("pipeline.S must be at least 2, got {}", self.segments));
        }
        if self.d_zeta == 0 || self.d_zeta % self.segments != 0 {
            return bad(format!(
                "pipeline.d_zeta = {} is not divisible by pipeline.S = {}",
                self.d_zeta, self.segments
            ));
        }
        if self.d_xi == 0 || self.d_xi % self.segments != 0 {
            return bad(format!(
                "interactor.d_xi = {} is not divisible by pipeline.S = {}",
                self.d_xi, self.segments
            ));
        }
        for (k, v) in [("loss.lambda", self.lambda), ("loss.eta", self.eta), ("train.aug_factor", self.aug_factor)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("train.lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1) and train.eps must be > 0".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        if self.proto_iters > self.epochs {
            return bad(format!(
                "train.proto_iters = {} exceeds train.epochs = {}",
                self.proto_iters, self.epochs
            ));
        }
        if self.base_classes == 0 || (self.sessions > 0 && (self.ways == 0 || self.shots == 0)) {
            return bad("protocol.base_classes, protocol.ways and protocol.shots must be positive".into());
        }
        if self.base_shots == Some(0) {
            return bad("protocol.base_shots must be positive".into());
        }
        if self.train_path.is_some() != self.test_path.is_some() {
            return bad("data.train_path and data.test_path must be given together".into());
        }
        let s = &self.synth;
        if s.d_h == 0 || s.tokens == 0 || s.train_per_class == 0 {
            return bad("synth.d_h, synth.L and synth.train_per_class must be positive".into());
        }
        if !(s.sigma > 0.0 && s.sigma.is_finite()) || !(s.aug_sigma >= 0.0 && s.aug_sigma.is_finite()) {
            return bad("synth.sigma must be > 0 and synth.aug_sigma >= 0".into());
        }
        self.interactor_config().validate()
    }

    /// Total number of classes the protocol consumes.
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.sessions * self.ways
    }

    pub fn pipeline_config(&self, d_h: usize, tokens: usize) -> PipelineConfig {
        let mut p = PipelineConfig::new(d_h, tokens, self.segments, self.d_zeta);
        if let Some(h) = self.mlp_hidden {
            p.mlp_hidden = h;
        }
        p
    }

    pub fn interactor_config(&self) -> InteractorConfig {
        let mut c = InteractorConfig::new(self.variant, self.segments, self.d_zeta, self.d_xi).with_heads(self.heads);
        if let Some(l) = self.layers {
            c = c.with_layers(l);
        }
        c.activation = self.activation;
        c
    }

    /// Text that [`Config::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let opt = |v: Option<usize>| v.map_or("default".to_string(), |v| v.to_string());
        let mut kv = |k: &str, v: String| writeln!(o, "{k} = {v}").unwrap();
        kv("pipeline.S", self.segments.to_string());
        kv("pipeline.d_zeta", self.d_zeta.to_string());
        kv("pipeline.mlp_hidden", opt(self.mlp_hidden));
        kv("interactor.variant", self.variant.name().to_string());
        kv("interactor.d_xi", self.d_xi.to_string());
        kv("interactor.activation", self.activation.name().to_string());
        kv("interactor.layers", opt(self.layers));
        kv("interactor.heads", self.heads.to_string());
        kv("loss.lambda", format!("{:?}", self.lambda));
        kv("loss.eta", format!("{:?}", self.eta));
        kv("train.epochs", self.epochs.to_string());
        kv("train.proto_iters", self.proto_iters.to_string());
        kv("train.lr", format!("{:?}", self.lr));
        kv("train.beta1", format!("{:?}", self.beta1));
        kv("train.beta2", format!("{:?}", self.beta2));
        kv("train.eps", format!("{:?}", self.adam_eps));
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.rehearsal_aug", self.rehearsal_aug.to_string());
        kv("train.aug_factor", format!("{:?}", self.aug_factor));
        kv("protocol.base_classes", self.base_classes.to_string());
        kv("protocol.sessions", self.sessions.to_string());
        kv("protocol.ways", self.ways.to_string());
        kv("protocol.shots", self.shots.to_string());
        kv("protocol.base_shots", self.base_shots.map_or("all".to_string(), |v| v.to_string()));
        if let (Some(a), Some(b)) = (&self.train_path, &self.test_path) {
            kv("data.train_path", a.display().to_string());
            kv("data.test_path", b.display().to_string());
        }
        kv("synth.d_h", self.synth.d_h.to_string());
        kv("synth.L", self.synth.tokens.to_string());
        kv("synth.train_per_class", self.synth.train_per_class.to_string());
        kv("synth.test_per_class", self.synth.test_per_class.to_string());
        kv("synth.sigma", format!("{:?}", self.synth.sigma));
        kv("synth.aug_sigma", format!("{:?}", self.synth.aug_sigma));
        kv("synth.seed", self.synth.seed.to_string());
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_desk_default() {
        assert_eq!(Config::parse("# nothing\n\n").unwrap(), Config::default());
    }

    #[test]
    fn keys_comments_and_round_trip() {
        let text = "pipeline.S = 4   # fewer nodes\ninteractor.variant = GraphSage\nloss.lambda=0.01\n\
                    train.proto_iters = 5\ntrain.epochs = 10\ninteractor.layers = 3\n";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.segments, 4);
        assert_eq!(c.variant, Variant::GraphSage);
        assert_eq!(c.lambda, 0.01);
        assert_eq!(c.layers, Some(3));
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::parse("pipeline.S = 1").is_err());
        assert!(Config::parse("pipeline.S = 3").is_err());
        assert!(Config::parse("bogus.key = 1").is_err());
        assert!(Config::parse("just words").is_err());
        assert!(Config::parse("train.proto_iters = 200").is_err());
        assert!(Config::parse("train.lr = 0").is_err());
        assert!(Config::parse("loss.eta = -1").is_err());
        assert!(Config::parse("interactor.variant = mlp").is_err());
        assert!(Config::parse("data.train_path = a.bin").is_err());
        assert!(Config::parse("interactor.variant = gat\ninteractor.layers = 3").is_err());
    }
}
