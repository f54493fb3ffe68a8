//! Run configuration: defaults per task, TOML file loading, and the merge
//! rule (a config file overrides command-line flags, which override the
//! task defaults).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pfn_core::arch::{FusionKind, OutputActivation, PfnConfig};
use pfn_core::loss::DepthLossConfig;
use pfn_core::rng::fnv1a;
use pfn_core::synth::SceneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Depth,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    /// Regress relative poses with the trainable pose head.
    Learned,
    /// Feed the generator's exact relative poses.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// base * (1 - iter/max_iter)^power.
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Cws,
    Ctc,
}

impl Fusion {
    pub fn to_core(self) -> FusionKind {
        match self {
            Fusion::Cws => FusionKind::Cws,
            Fusion::Ctc => FusionKind::Ctc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Linear,
}

/// Synthetic data settings; `scenes` counts scene indices scanned by the
/// generator, of which the train split takes the even ones and the val
/// split the odd ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Horizontal flips for segmentation training (the only augmentation).
    pub flip_augment: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scenes: 24,
            height: 64,
            width: 64,
            num_classes: 5,
            flip_augment: false,
        }
    }
}

impl DataSection {
    pub fn to_scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            ..SceneConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub scales: usize,
    pub expansion: usize,
    pub expansion_schedule: Option<Vec<usize>>,
    pub shared_channels: usize,
    pub private_channels: usize,
    pub kernel: usize,
    pub fusion_inner: Fusion,
    pub fusion_output: Fusion,
    pub cws_weighted: bool,
    pub clamp_hi: f64,
    pub output_scales: usize,
    pub output_channels: usize,
    pub output_activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            scales: 3,
            expansion: 2,
            expansion_schedule: None,
            shared_channels: 4,
            private_channels: 8,
            kernel: 3,
            fusion_inner: Fusion::Cws,
            fusion_output: Fusion::Ctc,
            cws_weighted: true,
            clamp_hi: 1e4,
            output_scales: 3,
            output_channels: 1,
            output_activation: Activation::Sigmoid,
        }
    }
}

impl ModelSection {
    pub fn to_core(&self) -> PfnConfig {
        PfnConfig {
            scales: self.scales,
            expansion: self.expansion,
            expansion_schedule: self.expansion_schedule.clone(),
            shared_channels: self.shared_channels,
            private_channels: self.private_channels,
            kernel: self.kernel,
            fusion_inner: self.fusion_inner.to_core(),
            fusion_output: self.fusion_output.to_core(),
            cws_weighted: self.cws_weighted,
            clamp_hi: self.clamp_hi,
            output_scales: self.output_scales,
            output_channels: self.output_channels,
            output_activation: match self.output_activation {
                Activation::Sigmoid => OutputActivation::Sigmoid,
                Activation::Linear => OutputActivation::Linear,
            },
            input_channels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub gamma: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub ssim_window: usize,
    pub automask: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = DepthLossConfig::default();
        LossSection {
            alpha: d.alpha,
            gamma: d.gamma,
            min_depth: d.min_depth,
            max_depth: d.max_depth,
            ssim_window: d.ssim_window,
            automask: d.automask,
        }
    }
}

impl LossSection {
    pub fn to_core(&self) -> DepthLossConfig {
        DepthLossConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            min_depth: self.min_depth,
            max_depth: self.max_depth,
            ssim_window: self.ssim_window,
            automask: self.automask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub lr_schedule: Schedule,
    pub lr_power: f64,
    pub max_iter: u64,
    pub batch_size: usize,
    pub grad_clip_max_norm: f64,
    pub seed: u64,
    pub pose_source: PoseSource,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::default_for(Task::Depth)
    }
}

impl TrainConfig {
    pub fn default_for(task: Task) -> Self {
        let base = TrainConfig {
            task: Task::Depth,
            lr: 1e-4,
            lr_schedule: Schedule::Constant,
            lr_power: 0.9,
            max_iter: 500,
            batch_size: 2,
            grad_clip_max_norm: 1.0,
            seed: 1,
            pose_source: PoseSource::Learned,
            checkpoint_every: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
        };
        match task {
            Task::Depth => base,
            Task::Segmentation => TrainConfig {
                task: Task::Segmentation,
                lr: 1e-2,
                lr_schedule: Schedule::Poly,
                max_iter: 2000,
                data: DataSection {
                    num_classes: 8,
                    ..base.data
                },
                model: ModelSection {
                    output_channels: 8,
                    output_activation: Activation::Linear,
                    ..base.model
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bail!("lr must be positive and finite, got {}", self.lr);
        }
        if self.batch_size < 1 {
            bail!("batch_size must be >= 1, got {}", self.batch_size);
        }
        if !(self.grad_clip_max_norm > 0.0) {
            bail!(
                "grad_clip_max_norm must be positive, got {}",
                self.grad_clip_max_norm
            );
        }
        if !(self.lr_power > 0.0) || !self.lr_power.is_finite() {
            bail!("lr_power must be positive and finite, got {}", self.lr_power);
        }
        if self.data.scenes < 1 {
            bail!("data.scenes must be >= 1");
        }
        let core = self.model.to_core();
        core.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        let m = core.resolution_multiple();
        if self.data.height % m != 0 || self.data.width % m != 0 || self.data.height == 0 {
            bail!(
                "input {}x{} is not a multiple of {} required by {} scales",
                self.data.height,
                self.data.width,
                m,
                core.scales
            );
        }
        self.loss
            .to_core()
            .validate()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        match self.task {
            Task::Depth => {
                if self.model.output_channels != 1
                    || self.model.output_activation != Activation::Sigmoid
                {
                    bail!("depth task needs output_channels = 1 and sigmoid output");
                }
            }
            Task::Segmentation => {
                if self.model.output_channels != self.data.num_classes {
                    bail!(
                        "segmentation output_channels {} must equal data.num_classes {}",
                        self.model.output_channels,
                        self.data.num_classes
                    );
                }
                if self.model.output_activation != Activation::Linear {
                    bail!("segmentation task needs linear output (raw logits)");
                }
                if self.data.num_classes < 2 || self.data.num_classes > 256 {
                    bail!(
                        "segmentation needs 2..=256 classes, got {}",
                        self.data.num_classes
                    );
                }
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable 64-bit digest of the canonical serialization; checkpoints
    /// record it so stale configs are caught before parameter loading.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_toml_string().as_bytes())
    }
}

/// Applies `path` on top of `base`: keys present in the file win, everything
/// else keeps the flag/default value. Unknown keys are rejected.
pub fn overlay_file(base: &TrainConfig, path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let file: toml::Value = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let mut merged = toml::Value::try_from(base).context("serializing defaults")?;
    merge_value(&mut merged, &file);
    let cfg: TrainConfig = merged
        .try_into()
        .with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

fn merge_value(dst: &mut toml::Value, src: &toml::Value) {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (key, sv) in s {
                match d.get_mut(key) {
                    Some(dv) => merge_value(dv, sv),
                    None => {
                        d.insert(key.clone(), sv.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

/// Reads just the `task` key of a config file, for picking defaults before
/// the full merge.
pub fn peek_task(path: &Path) -> Result<Option<Task>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let val: toml::Value = toml::from_str(&text)?;
    match val.get("task") {
        None => Ok(None),
        Some(v) => {
            let t: Task = v.clone().try_into().context("invalid task")?;
            Ok(Some(t))
        }
    }
}

/// Dotted paths where two configs disagree, for incompatibility messages.
pub fn diff_fields(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let va = toml::Value::try_from(a).expect("config serializes");
    let vb = toml::Value::try_from(b).expect("config serializes");
    let mut out = Vec::new();
    diff_value("", &va, &vb, &mut out);
    out
}

fn diff_value(path: &str, a: &toml::Value, b: &toml::Value, out: &mut Vec<String>) {
    match (a, b) {
        (toml::Value::Table(ta), toml::Value::Table(tb)) => {
            let keys: std::collections::BTreeSet<_> = ta.keys().chain(tb.keys()).collect();
            for key in keys {
                let sub = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match (ta.get(key), tb.get(key)) {
                    (Some(x), Some(y)) => diff_value(&sub, x, y, out),
                    (Some(x), None) => out.push(format!("{sub}: {x} vs (absent)")),
                    (None, Some(y)) => out.push(format!("{sub}: (absent) vs {y}")),
                    (None, None) => {}
                }
            }
        }
        (x, y) => {
            if x != y {
                out.push(format!("{path}: {x} vs {y}"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_flags() {
        let dir = std::env::temp_dir().join(format!("pfn-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("override.toml");
        std::fs::write(&path, "lr = 0.5\n[model]\nscales = 4\n").unwrap();
        let mut base = TrainConfig::default_for(Task::Depth);
        base.lr = 0.25; // pretend a flag set this
        let cfg = overlay_file(&base, &path).unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.model.scales, 4);
        assert_eq!(cfg.batch_size, base.batch_size);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = std::env::temp_dir().join(format!("pfn-cfg-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        std::fs::write(&path, "learning_rate = 0.5\n").unwrap();
        let base = TrainConfig::default();
        assert!(overlay_file(&base, &path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn diff_lists_changed_paths() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.model.scales = 4;
        b.lr = 0.9;
        let d = diff_fields(&a, &b);
        assert!(d.iter().any(|s| s.starts_with("model.scales")));
        assert!(d.iter().any(|s| s.starts_with("lr")));
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn segmentation_defaults_validate() {
        TrainConfig::default_for(Task::Segmentation).validate().unwrap();
        TrainConfig::default_for(Task::Depth).validate().unwrap();
    }

    #[test]
    fn mismatched_head_rejected() {
        let mut cfg = TrainConfig::default_for(Task::Segmentation);
        cfg.model.output_channels = 3;
        assert!(cfg.validate().is_err());
    }
}
