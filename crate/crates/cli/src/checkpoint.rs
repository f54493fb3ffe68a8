//! Checkpoints: a TOML manifest (iteration, config echo and hash, tensor
//! inventory, metric snapshot) next to flat binary blobs for parameter
//! values and optimizer moments. Reloading restores training state
//! bit-identically for f32 parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pfn_core::arch::{PfnModel, PoseNet};
use pfn_core::optim::ParamSet;
use pfn_core::rng::hash_mix;
use pfn_core::Tensor;

use crate::config::{diff_fields, PoseSource, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_SEED_SALT: u64 = 0x0de1;
pub const POSE_SEED_SALT: u64 = 0x905e;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub iteration: u64,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub set: String,
    pub shape: [usize; 4],
}

/// The training state a checkpoint restores.
pub struct TrainState {
    pub model: PfnModel<f32>,
    pub pose: Option<PoseNet<f32>>,
}

impl TrainState {
    /// Freshly initialized networks for `cfg` (deterministic in cfg.seed).
    pub fn fresh(cfg: &TrainConfig) -> Result<TrainState> {
        let model = PfnModel::new(cfg.model.to_core(), hash_mix(cfg.seed, MODEL_SEED_SALT, 0))
            .map_err(|e| anyhow::anyhow!("building model: {e}"))?;
        let pose = match cfg.pose_source {
            PoseSource::Learned => Some(
                PoseNet::new(hash_mix(cfg.seed, POSE_SEED_SALT, 0))
                    .map_err(|e| anyhow::anyhow!("building pose head: {e}"))?,
            ),
            PoseSource::GroundTruth => None,
        };
        Ok(TrainState { model, pose })
    }
}

fn inventory(state: &TrainState) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = state
        .model
        .params()
        .iter()
        .map(|(_, p)| ("model".to_string(), p.name.clone()))
        .collect();
    if let Some(pose) = &state.pose {
        out.extend(
            pose.params()
                .iter()
                .map(|(_, p)| ("pose".to_string(), p.name.clone())),
        );
    }
    out.sort();
    out.into_iter().map(|(set, name)| (name, set)).collect()
}

fn set_of<'a>(state: &'a TrainState, set: &str) -> Result<&'a ParamSet<f32>> {
    match set {
        "model" => Ok(state.model.params()),
        "pose" => state
            .pose
            .as_ref()
            .map(|p| p.params())
            .context("checkpoint holds pose parameters but config has pose_source = ground_truth"),
        other => bail!("unknown parameter set {other:?}"),
    }
}

fn set_of_mut<'a>(state: &'a mut TrainState, set: &str) -> Result<&'a mut ParamSet<f32>> {
    match set {
        "model" => Ok(state.model.params_mut()),
        "pose" => state
            .pose
            .as_mut()
            .map(|p| p.params_mut())
            .context("checkpoint holds pose parameters but config has pose_source = ground_truth"),
        other => bail!("unknown parameter set {other:?}"),
    }
}

/// Writes manifest.toml, params.bin and optim.bin into `dir`.
pub fn save(
    dir: &Path,
    cfg: &TrainConfig,
    state: &TrainState,
    iteration: u64,
    metrics: &BTreeMap<String, f64>,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let entries = inventory(state);
    let mut manifest_tensors = Vec::with_capacity(entries.len());
    let mut params_bin = Vec::new();
    let mut optim_bin = Vec::new();
    for (name, set_name) in &entries {
        let set = set_of(state, set_name)?;
        let id = set
            .lookup(name)
            .with_context(|| format!("parameter {name} vanished"))?;
        let p = set.get(id);
        let s = p.value.shape;
        manifest_tensors.push(TensorEntry {
            name: name.clone(),
            set: set_name.clone(),
            shape: [s.n, s.c, s.h, s.w],
        });
        params_bin.extend_from_slice(&p.value.encode());
        optim_bin.extend_from_slice(&p.step_count.to_le_bytes());
        for &m in &p.adam_m {
            optim_bin.extend_from_slice(&m.to_le_bytes());
        }
        for &v in &p.adam_v {
            optim_bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        iteration,
        config_hash: format!("{:016x}", cfg.hash()),
        metrics: metrics.clone(),
        config: cfg.clone(),
        tensors: manifest_tensors,
    };
    fs::write(dir.join("manifest.toml"), toml::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("params.bin"), params_bin)?;
    fs::write(dir.join("optim.bin"), optim_bin)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.toml"))
        .with_context(|| format!("no checkpoint manifest in {}", dir.display()))?;
    let manifest: Manifest = toml::from_str(&text).context("parsing checkpoint manifest")?;
    if manifest.format_version != FORMAT_VERSION {
        bail!(
            "checkpoint format {} not supported (expected {})",
            manifest.format_version,
            FORMAT_VERSION
        );
    }
    Ok(manifest)
}

/// Restores a checkpoint. When `expect` is given it must match the stored
/// config exactly; differences are listed field by field.
pub fn load(dir: &Path, expect: Option<&TrainConfig>) -> Result<(Manifest, TrainState)> {
    let manifest = read_manifest(dir)?;
    if let Some(want) = expect {
        let diffs = diff_fields(&manifest.config, want);
        if !diffs.is_empty() {
            bail!(
                "checkpoint {} is incompatible with the requested config:\n  {}",
                dir.display(),
                diffs.join("\n  ")
            );
        }
    }
    let mut state = TrainState::fresh(&manifest.config)?;
    let params_bin = fs::read(dir.join("params.bin"))
        .with_context(|| format!("reading {}", dir.join("params.bin").display()))?;
    let optim_bin = fs::read(dir.join("optim.bin"))
        .with_context(|| format!("reading {}", dir.join("optim.bin").display()))?;

    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut poff = 0usize;
    let mut ooff = 0usize;
    for entry in &manifest.tensors {
        let (tensor, used) = Tensor::<f32>::decode(&params_bin[poff..])
            .map_err(|e| anyhow::anyhow!("decoding {}: {e}", entry.name))?;
        poff += used;
        let s = tensor.shape;
        if [s.n, s.c, s.h, s.w] != entry.shape {
            bail!(
                "tensor {} is {s} in params.bin but {:?} in the manifest",
                entry.name,
                entry.shape
            );
        }
        let count = s.count();
        let set = set_of_mut(&mut state, &entry.set)?;
        let id = match set.lookup(&entry.name) {
            Some(id) => id,
            None => bail!(
                "checkpoint tensor {} does not exist in the rebuilt {} network \
                 (architecture drift?)",
                entry.name,
                entry.set
            ),
        };
        set.set_value(id, tensor)
            .map_err(|e| anyhow::anyhow!("loading {}: {e}", entry.name))?;

        let need = 8 + 2 * count * 4;
        if optim_bin.len() < ooff + need {
            bail!("optim.bin truncated at {}", entry.name);
        }
        let step = u64::from_le_bytes(optim_bin[ooff..ooff + 8].try_into().unwrap());
        ooff += 8;
        let moments = |off: &mut usize| -> Vec<f32> {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(f32::from_le_bytes(
                    optim_bin[*off..*off + 4].try_into().unwrap(),
                ));
                *off += 4;
            }
            v
        };
        let m = moments(&mut ooff);
        let v = moments(&mut ooff);
        set.set_adam_state(id, m, v, step)
            .map_err(|e| anyhow::anyhow!("restoring moments of {}: {e}", entry.name))?;
        *seen.entry(match entry.set.as_str() {
            "model" => "model",
            _ => "pose",
        })
        .or_insert(0) += 1;
    }
    if poff != params_bin.len() {
        bail!("params.bin holds {} trailing bytes", params_bin.len() - poff);
    }

    let model_count = state.model.params().len();
    if seen.get("model").copied().unwrap_or(0) != model_count {
        bail!(
            "checkpoint covers {} of {} model parameters",
            seen.get("model").copied().unwrap_or(0),
            model_count
        );
    }
    if let Some(pose) = &state.pose {
        if seen.get("pose").copied().unwrap_or(0) != pose.params().len() {
            bail!(
                "checkpoint covers {} of {} pose parameters",
                seen.get("pose").copied().unwrap_or(0),
                pose.params().len()
            );
        }
    }
    Ok((manifest, state))
}
