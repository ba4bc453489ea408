//! Flat `key = value` run configuration.

use std::fmt;

use sparse_recursion::diffusion::{DatasetKind, DitConfig, TrainConfig};
use sparse_recursion::frozenlake::{LakeConfig, LakeTrainConfig};
use sparse_recursion::recursion::RecursionConfig;
use sparse_recursion::routing::GateInputs;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Field { key: String, msg: String },
}

fn field(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field { key: key.to_string(), msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Diffusion,
    Frozenlake,
}

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e} ({s:?})"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, f64, bool, String);

impl Value for Task {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "diffusion" => Ok(Task::Diffusion),
            "frozenlake" => Ok(Task::Frozenlake),
            _ => Err(format!("expected diffusion or frozenlake, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            Task::Diffusion => "diffusion".into(),
            Task::Frozenlake => "frozenlake".into(),
        }
    }
}

impl Value for DatasetKind {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for GateInputs {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(GateInputs::Full),
            "vision_only" => Ok(GateInputs::VisionOnly),
            _ => Err(format!("expected full or vision_only, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            GateInputs::Full => "full".into(),
            GateInputs::VisionOnly => "vision_only".into(),
        }
    }
}

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{e} ({p:?})"))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Value for Option<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $t:ty = $default:expr,)*) => {
        /// Every hyperparameter of a run. Serialized in declaration order.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$t as Value>::parse_value(value).map_err(|m| field(key, m))?;
                    })*
                    _ => return Err(field(key, "unknown key")),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), self.$name.render()),)*]
            }
        }
    };
}

run_config! {
    task: Task = Task::Diffusion,
    seed: u64 = 0,
    optimizer: String = "adamw".into(),
    lr: f64 = 5e-4,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    weight_decay: f64 = 0.0,
    batch_size: usize = 8,
    steps: usize = 10_000,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    checkpoint_every: usize = 0,
    balance_weight: f64 = 0.01,
    experts: usize = 2,
    latent_steps: usize = 2,
    tau: f64 = 5.0,
    lora_rank: usize = 8,
    /// 0-based block indices carrying the recursion.
    target_layers: Vec<usize> = vec![2],
    remodulate: bool = false,
    gate_inputs: GateInputs = GateInputs::Full,
    image_size: usize = 16,
    channels: usize = 1,
    patch: usize = 4,
    dim: usize = 64,
    heads: usize = 4,
    layers: usize = 6,
    classes: usize = 4,
    dataset: DatasetKind = DatasetKind::Shapes,
    dataset_size: usize = 512,
    diffusion_steps: usize = 100,
    grid: usize = 4,
    cell_px: usize = 4,
    encoder_layers: usize = 2,
    maps: usize = 400,
    holdout_fraction: f64 = 0.2,
    hole_density: f64 = 0.2,
    max_holes: Option<usize> = Some(2),
    epsilon: f64 = 0.2,
    rollouts_per_map: usize = 8,
    gate_weight: f64 = 1.0,
    frame_weight: f64 = 10.0,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines and
    /// `[section]` lines are ignored. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg = RunConfig::parse_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`RunConfig::parse`] without the cross-field validation.
    pub fn parse_unchecked(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Syntax { line: i + 1, msg: format!("duplicate key {k}") });
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.optimizer != "adamw" {
            return Err(field("optimizer", format!("only adamw is supported, got {:?}", self.optimizer)));
        }
        if !(self.lr > 0.0) {
            return Err(field("lr", "must be positive"));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(field(k, "must be in [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(field("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be >= 1"));
        }
        if self.experts == 0 {
            return Err(field("experts", "must be >= 1"));
        }
        if self.latent_steps == 0 {
            return Err(field("latent_steps", "must be >= 1"));
        }
        if !(self.tau > 0.0) {
            return Err(field("tau", "must be positive"));
        }
        if self.balance_weight < 0.0 {
            return Err(field("balance_weight", "must be >= 0"));
        }
        match self.task {
            Task::Diffusion => {
                if !self.image_size.is_multiple_of(self.patch.max(1)) || self.patch == 0 {
                    return Err(field("patch", format!("must divide image_size {}", self.image_size)));
                }
                if !self.dim.is_multiple_of(4) || self.dim == 0 {
                    return Err(field("dim", "must be a positive multiple of 4"));
                }
                if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
                    return Err(field("heads", format!("must divide dim {}", self.dim)));
                }
                if let Some(&l) = self.target_layers.iter().find(|&&l| l >= self.layers) {
                    return Err(field("target_layers", format!("layer {l} out of range for {} layers", self.layers)));
                }
                if self.lora_rank == 0 || self.lora_rank > self.dim {
                    return Err(field("lora_rank", format!("must be in 1..={}", self.dim)));
                }
                if self.classes < 2 {
                    return Err(field("classes", "must be >= 2"));
                }
                if self.dataset_size < self.classes {
                    return Err(field("dataset_size", "must cover every class"));
                }
                if self.diffusion_steps < 2 {
                    return Err(field("diffusion_steps", "must be >= 2"));
                }
                self.dit().validate().map_err(|e| field("model", e.to_string()))?;
            }
            Task::Frozenlake => {
                if self.experts != 4 {
                    return Err(field("experts", "frozenlake needs exactly 4 experts (one per action)"));
                }
                if !(0.0..=0.4).contains(&self.hole_density) {
                    return Err(field("hole_density", "must be in [0, 0.4]"));
                }
                if !(0.0..1.0).contains(&self.holdout_fraction) {
                    return Err(field("holdout_fraction", "must be in [0, 1)"));
                }
                if !(0.0..=1.0).contains(&self.epsilon) {
                    return Err(field("epsilon", "must be in [0, 1]"));
                }
                if self.maps == 0 || self.rollouts_per_map == 0 {
                    return Err(field("maps", "maps and rollouts_per_map must be >= 1"));
                }
                self.lake().validate().map_err(|e| field("model", e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn recursion(&self) -> RecursionConfig {
        RecursionConfig {
            experts: self.experts,
            latent_steps: self.latent_steps,
            tau: self.tau,
            remodulate: self.remodulate,
            gate_inputs: self.gate_inputs,
            pooled: false,
        }
    }

    pub fn dit(&self) -> DitConfig {
        DitConfig {
            channels: self.channels,
            image_size: self.image_size,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            classes: self.classes,
            target_layers: self.target_layers.clone(),
            lora_rank: self.lora_rank,
            recursion: self.recursion(),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            balance_weight: self.balance_weight,
            seed: self.seed,
        }
    }

    pub fn lake(&self) -> LakeConfig {
        LakeConfig {
            grid: self.grid,
            cell_px: self.cell_px,
            dim: self.dim,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            experts: self.experts,
            lora_rank: self.lora_rank,
            tau: self.tau,
            remodulate: self.remodulate,
        }
    }

    pub fn lake_train(&self) -> LakeTrainConfig {
        LakeTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            gate_weight: self.gate_weight,
            frame_weight: self.frame_weight,
            seed: self.seed,
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_string();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        assert!(text.contains("lr = 0.0005\n"));
        assert!(text.contains("target_layers = 2\n"));
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "# smoke run\n[train]\nsteps = 200\nlr=0.001  # faster\ntarget_layers = 1, 3\nmax_holes = none\ngate_inputs = vision_only\ntau = 0.1\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.steps, 200);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.target_layers, vec![1, 3]);
        assert_eq!(cfg.max_holes, None);
        assert_eq!(cfg.gate_inputs, GateInputs::VisionOnly);
        assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("lr = -1", "lr"),
            ("heads = 3", "heads"),
            ("target_layers = 9", "target_layers"),
            ("bogus = 1", "bogus"),
            ("steps = many", "steps"),
            ("task = frozenlake\nexperts = 3", "experts"),
            ("optimizer = sgd", "optimizer"),
        ];
        for (text, key) in cases {
            match RunConfig::parse(text) {
                Err(ConfigError::Field { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(RunConfig::parse("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::Syntax { line: 2, .. })));
    }
}
