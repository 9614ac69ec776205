//! Model and training configuration, presets, and the flat `key=value` text
//! format shared by config files, `--set` overrides and checkpoints.
//!
//! Grammar: one `key=value` per line; blank lines and lines starting with
//! `#` are ignored; surrounding whitespace is trimmed. Grids and sizes are
//! written `HxW`, booleans `true`/`false`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pfe::PATCH;

/// Component switches; disabling one removes its parameters and subgraph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Soft aggregation of centers (attention + fusion).
    pub fa: bool,
    /// Temperature-scaled cosine attention; dot product when off.
    pub tcos: bool,
    /// Learned gate; fixed 0.5 blend when off.
    pub gate: bool,
    /// Reuse the first block's assignment within a stage.
    pub shared: bool,
    /// Depth-wise positional residuals.
    pub pos_emb: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            fa: true,
            tcos: true,
            gate: true,
            shared: true,
            pos_emb: true,
        }
    }
}

/// How a stage is entered from the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionKind {
    /// Patch embedding of the image (first stage only).
    Embed,
    /// Cluster pooling, halving both extents.
    Pool,
    /// Channel projection at unchanged resolution.
    Project,
}

impl TransitionKind {
    fn as_str(self) -> &'static str {
        match self {
            TransitionKind::Embed => "embed",
            TransitionKind::Pool => "pool",
            TransitionKind::Project => "project",
        }
    }

    fn parse(key: &str, s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(TransitionKind::Embed),
            "pool" => Ok(TransitionKind::Pool),
            "project" => Ok(TransitionKind::Project),
            _ => Err(Error::config(key, format!("expected embed, pool or project, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub dim_prime: usize,
    pub heads: usize,
    /// Requested cluster grid; clamped to the stage map.
    pub grid: (usize, usize),
    pub share_assignment: bool,
    pub transition: TransitionKind,
}

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    /// Linear layers in each pooling perceptron.
    pub icp_depth: usize,
    pub ablation: Ablation,
}

fn stage(depth: usize, dim: usize, heads: usize, transition: TransitionKind) -> StageConfig {
    StageConfig {
        depth,
        dim,
        dim_prime: dim,
        heads,
        grid: (7, 7),
        share_assignment: true,
        transition,
    }
}

pub const PRESETS: &[&str] = &[
    "micro",
    "tiny",
    "small",
    "micro-cifar",
    "tiny-cifar",
    "small-cifar",
    "micro-toy",
];

impl ModelConfig {
    fn pyramid(input: usize, widths: [usize; 4], depths: [usize; 4], small_input: bool) -> Self {
        use TransitionKind::*;
        let kinds = if small_input {
            [Embed, Project, Pool, Pool]
        } else {
            [Embed, Pool, Pool, Pool]
        };
        let heads = [2, 2, 4, 4];
        ModelConfig {
            input_size: (input, input),
            num_classes: 100,
            stages: (0..4).map(|k| stage(depths[k], widths[k], heads[k], kinds[k])).collect(),
            icp_depth: 2,
            ablation: Ablation::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        const MICRO: ([usize; 4], [usize; 4]) = ([32, 64, 128, 256], [2, 2, 4, 2]);
        const TINY: ([usize; 4], [usize; 4]) = ([48, 96, 176, 352], [2, 2, 4, 2]);
        const SMALL: ([usize; 4], [usize; 4]) = ([64, 128, 272, 544], [2, 2, 6, 2]);
        let cfg = match name {
            "micro" => Self::pyramid(224, MICRO.0, MICRO.1, false),
            "tiny" => Self::pyramid(224, TINY.0, TINY.1, false),
            "small" => Self::pyramid(224, SMALL.0, SMALL.1, false),
            "micro-cifar" => Self::pyramid(32, MICRO.0, MICRO.1, true),
            "tiny-cifar" => Self::pyramid(32, TINY.0, TINY.1, true),
            "small-cifar" => Self::pyramid(32, SMALL.0, SMALL.1, true),
            "micro-toy" => {
                let mut c = Self::pyramid(16, [8; 4], [2, 1, 1, 1], true);
                c.num_classes = 3;
                for s in &mut c.stages {
                    s.heads = 2;
                    s.grid = (2, 2);
                }
                c
            }
            _ => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")),
                ))
            }
        };
        Ok(cfg)
    }

    /// Number of pooling transitions.
    pub fn pools(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| s.transition == TransitionKind::Pool)
            .count()
    }

    /// Input extents must divide by the patch size times one factor of two
    /// per pooling transition.
    pub fn divisor(&self) -> usize {
        PATCH << self.pools()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.stages.len() != NUM_STAGES {
            return Err(Error::config("stages", format!("expected {NUM_STAGES}, got {}", self.stages.len())));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if !(1..=3).contains(&self.icp_depth) {
            return Err(Error::config("icp_depth", format!("must be 1, 2 or 3, got {}", self.icp_depth)));
        }
        for (k, s) in self.stages.iter().enumerate() {
            let key = |f: &str| format!("stage{}.{f}", k + 1);
            if s.depth == 0 {
                return Err(Error::config(key("depth"), "must be at least 1"));
            }
            if s.dim == 0 || s.dim_prime == 0 {
                return Err(Error::config(key("dim"), "widths must be positive"));
            }
            if s.heads == 0 || s.dim_prime % s.heads != 0 {
                return Err(Error::config(
                    key("heads"),
                    format!("{} does not divide dim_prime {}", s.heads, s.dim_prime),
                ));
            }
            if s.grid.0 == 0 || s.grid.1 == 0 {
                return Err(Error::config(key("grid"), "must be at least 1x1"));
            }
            let first = k == 0;
            if first != (s.transition == TransitionKind::Embed) {
                return Err(Error::config(
                    key("transition"),
                    "the first stage embeds the image and later stages pool or project",
                ));
            }
        }
        let div = self.divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(
                "input_size",
                format!("{h}x{w} must be a positive multiple of {div}"),
            ));
        }
        Ok(())
    }

    /// Map extents of every stage.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let mut cur = (self.input_size.0 / PATCH, self.input_size.1 / PATCH);
        self.stages
            .iter()
            .map(|s| {
                if s.transition == TransitionKind::Pool {
                    cur = (cur.0 / 2, cur.1 / 2);
                }
                cur
            })
            .collect()
    }

    /// Cluster grid of every stage after clamping to the map.
    pub fn effective_grids(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .zip(self.stage_sizes())
            .map(|(s, (h, w))| (s.grid.0.min(h), s.grid.1.min(w)))
            .collect()
    }

    /// Canonical serialization: fixed key order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let a = &self.ablation;
        let mut s = String::new();
        let _ = writeln!(s, "input_size={}x{}", self.input_size.0, self.input_size.1);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "icp_depth={}", self.icp_depth);
        let _ = writeln!(s, "fa={}", b(a.fa));
        let _ = writeln!(s, "tcos={}", b(a.tcos));
        let _ = writeln!(s, "gate={}", b(a.gate));
        let _ = writeln!(s, "shared={}", b(a.shared));
        let _ = writeln!(s, "pos_emb={}", b(a.pos_emb));
        for (k, st) in self.stages.iter().enumerate() {
            let p = format!("stage{}", k + 1);
            let _ = writeln!(s, "{p}.depth={}", st.depth);
            let _ = writeln!(s, "{p}.dim={}", st.dim);
            let _ = writeln!(s, "{p}.dim_prime={}", st.dim_prime);
            let _ = writeln!(s, "{p}.heads={}", st.heads);
            let _ = writeln!(s, "{p}.grid={}x{}", st.grid.0, st.grid.1);
            let _ = writeln!(s, "{p}.share={}", b(st.share_assignment));
            let _ = writeln!(s, "{p}.transition={}", st.transition.as_str());
        }
        s
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    /// Parse canonical (or partial) text on top of `base`.
    pub fn from_text(text: &str, base: ModelConfig) -> Result<Self> {
        let mut cfg = base;
        for (key, value) in parse_lines(text)? {
            if !cfg.apply(&key, &value)? {
                return Err(Error::config(key, "unknown key"));
            }
        }
        Ok(cfg)
    }

    /// Set one key. Returns `false` when the key is not a model key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_size" => self.input_size = parse_pair(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "icp_depth" => self.icp_depth = parse_num(key, value)?,
            "fa" => self.ablation.fa = parse_bool(key, value)?,
            "tcos" => self.ablation.tcos = parse_bool(key, value)?,
            "gate" => self.ablation.gate = parse_bool(key, value)?,
            "shared" => self.ablation.shared = parse_bool(key, value)?,
            "pos_emb" => self.ablation.pos_emb = parse_bool(key, value)?,
            _ => {
                let Some((head, field)) = key.split_once('.') else {
                    return Ok(false);
                };
                let Some(idx) = head.strip_prefix("stage").and_then(|n| n.parse::<usize>().ok()) else {
                    return Ok(false);
                };
                if idx == 0 || idx > self.stages.len() {
                    return Err(Error::config(key, format!("stage index must be 1..={}", self.stages.len())));
                }
                let st = &mut self.stages[idx - 1];
                match field {
                    "depth" => st.depth = parse_num(key, value)?,
                    "dim" => st.dim = parse_num(key, value)?,
                    "dim_prime" => st.dim_prime = parse_num(key, value)?,
                    "heads" => st.heads = parse_num(key, value)?,
                    "grid" => st.grid = parse_pair(key, value)?,
                    "share" => st.share_assignment = parse_bool(key, value)?,
                    "transition" => st.transition = TransitionKind::parse(key, value)?,
                    _ => return Ok(false),
                }
            }
        }
        Ok(true)
    }

    /// Sharing is in effect for a stage only when both the global flag and
    /// the stage flag are set.
    pub fn stage_shares(&self, k: usize) -> bool {
        self.ablation.shared && self.stages[k].share_assignment
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub flip: bool,
    pub dataset: DatasetKind,
    pub data_dir: String,
    pub synth_classes: usize,
    pub synth_train: usize,
    pub synth_val: usize,
    /// Stop once validation top-1 reaches this value; 0 disables.
    pub stop_at_val: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            base_lr: 1.5e-3,
            min_lr: 1e-5,
            warmup_epochs: 5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            flip: true,
            dataset: DatasetKind::Synthetic,
            data_dir: String::new(),
            synth_classes: 3,
            synth_train: 600,
            synth_val: 150,
            stop_at_val: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "base_lr" => self.base_lr = parse_num(key, value)?,
            "min_lr" => self.min_lr = parse_num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "flip" => self.flip = parse_bool(key, value)?,
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar100" => DatasetKind::Cifar100,
                    _ => return Err(Error::config(key, format!("expected synthetic or cifar100, got `{value}`"))),
                }
            }
            "data_dir" => self.data_dir = value.to_string(),
            "synth_classes" => self.synth_classes = parse_num(key, value)?,
            "synth_train" => self.synth_train = parse_num(key, value)?,
            "synth_val" => self.synth_val = parse_num(key, value)?,
            "stop_at_val" => self.stop_at_val = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::config("base_lr", "learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "betas must lie in [0, 1)"));
        }
        if self.dataset == DatasetKind::Synthetic && self.synth_classes < 2 {
            return Err(Error::config("synth_classes", "at least 2 classes"));
        }
        Ok(())
    }
}

/// Model and training settings together, as read from one config file.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Settings {
    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(Settings {
            model: ModelConfig::preset(name)?,
            train: TrainConfig::default(),
        })
    }

    /// Apply one override; unknown keys are errors. `preset` replaces the
    /// model configuration wholesale.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "preset" {
            self.model = ModelConfig::preset(value)?;
            return Ok(());
        }
        if self.model.apply(key, value)? || self.train.apply(key, value)? {
            return Ok(());
        }
        Err(Error::config(key, "unknown key"))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_lines(text)? {
            self.apply(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// `KEY=VALUE` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "override must look like KEY=VALUE"))?;
        self.apply(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", no + 1), format!("expected key=value, got `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once('x')
        .ok_or_else(|| Error::config(key, format!("expected HxW, got `{value}`")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn text_round_trip() {
        for name in PRESETS {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back = ModelConfig::from_text(&cfg.to_text(), ModelConfig::preset("micro").unwrap()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn stage_extents() {
        let cfg = ModelConfig::preset("micro").unwrap();
        assert_eq!(cfg.stage_sizes(), vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
        let cfg = ModelConfig::preset("micro-cifar").unwrap();
        assert_eq!(cfg.stage_sizes(), vec![(8, 8), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(cfg.effective_grids(), vec![(7, 7), (7, 7), (4, 4), (2, 2)]);
        let toy = ModelConfig::preset("micro-toy").unwrap();
        assert_eq!(toy.stage_sizes(), vec![(4, 4), (4, 4), (2, 2), (1, 1)]);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = ModelConfig::preset("micro").unwrap();
        cfg.stages[2].depth = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "stage3.depth"));
        let mut cfg = ModelConfig::preset("micro").unwrap();
        cfg.input_size = (96, 100);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "input_size"));
        let mut cfg = ModelConfig::preset("micro").unwrap();
        cfg.stages[1].heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "stage2.heads"));
    }

    #[test]
    fn settings_overrides() {
        let mut s = Settings::from_preset("micro-cifar").unwrap();
        s.apply_text("# comment\n\nepochs = 7\nstage2.grid=3x4\ngate=false\n").unwrap();
        assert_eq!(s.train.epochs, 7);
        assert_eq!(s.model.stages[1].grid, (3, 4));
        assert!(!s.model.ablation.gate);
        assert!(matches!(s.apply_override("nonsense=1"), Err(Error::Config { .. })));
        assert!(matches!(s.apply_override("epochs"), Err(Error::Config { .. })));
        assert!(matches!(s.apply_override("stage9.depth=1"), Err(Error::Config { .. })));
    }
}
