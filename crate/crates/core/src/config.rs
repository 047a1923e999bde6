//! Flat key-value configuration files.
//!
//! The format is one `key = value` pair per line, `#` comments, unknown keys
//! rejected. Every field of the model, training and augmentation
//! configurations has a key; omitted keys take their defaults.

use crate::augment::AugmentConfig;
use crate::bimamba::DirectionalityMode;
use crate::data::LabelTask;
use crate::error::{Error, Result};
use crate::model::{ClassTokenPos, ModelConfig, Variant};
use crate::rng::fnv1a;
use crate::train::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub augment_enabled: bool,
    pub task: LabelTask,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            model: ModelConfig::new(192, 12, Variant::Kwm, 12),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            augment_enabled: true,
            task: LabelTask::V2_12,
        }
    }
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn get_parsed<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`"))),
    }
}

fn get_bool(kv: &BTreeMap<String, String>, key: &str, default: bool) -> Result<bool> {
    match kv.get(key).map(|s| s.as_str()) {
        None => Ok(default),
        Some("true" | "1" | "yes") => Ok(true),
        Some("false" | "0" | "no") => Ok(false),
        Some(v) => Err(Error::Config(format!("bad boolean `{v}` for key `{key}`"))),
    }
}

const MODEL_KEYS: [&str; 17] = [
    "dim",
    "layers",
    "variant",
    "directionality",
    "num_classes",
    "freq_bins",
    "time_frames",
    "patch_f",
    "patch_t",
    "ffn_dim",
    "class_token_pos",
    "n_state",
    "conv_kernel",
    "expand",
    "double_residual",
    "fo_bi_shared_conv",
    "d_skip_init",
];

const TRAIN_KEYS: [&str; 10] = [
    "epochs",
    "batch_size",
    "lr0",
    "warmup_epochs",
    "weight_decay",
    "label_smoothing",
    "seed",
    "runs",
    "grad_clip",
    "early_stop_train_acc",
];

const AUGMENT_KEYS: [&str; 10] = [
    "augment",
    "shift_ms",
    "resample_lo",
    "resample_hi",
    "noise_volume",
    "noise_prob",
    "time_masks",
    "time_mask_max",
    "freq_masks",
    "freq_mask_max",
];

pub fn model_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let defaults = ModelConfig::new(192, 12, Variant::Kwm, 12);
    let mut cfg = ModelConfig::new(
        get_parsed(kv, "dim", defaults.dim)?,
        get_parsed(kv, "layers", defaults.layers)?,
        match kv.get("variant") {
            Some(v) => Variant::parse(v)?,
            None => defaults.variant,
        },
        get_parsed(kv, "num_classes", defaults.num_classes)?,
    );
    if let Some(v) = kv.get("directionality") {
        cfg.directionality = DirectionalityMode::parse(v)?;
    }
    if let Some(v) = kv.get("class_token_pos") {
        cfg.class_token_pos = ClassTokenPos::parse(v)?;
    }
    cfg.freq_bins = get_parsed(kv, "freq_bins", cfg.freq_bins)?;
    cfg.time_frames = get_parsed(kv, "time_frames", cfg.time_frames)?;
    cfg.patch_f = get_parsed(kv, "patch_f", cfg.patch_f)?;
    cfg.patch_t = get_parsed(kv, "patch_t", cfg.patch_t)?;
    cfg.ffn_dim = get_parsed(kv, "ffn_dim", cfg.ffn_dim)?;
    cfg.n_state = get_parsed(kv, "n_state", cfg.n_state)?;
    cfg.conv_kernel = get_parsed(kv, "conv_kernel", cfg.conv_kernel)?;
    cfg.expand = get_parsed(kv, "expand", cfg.expand)?;
    cfg.double_residual = get_bool(kv, "double_residual", cfg.double_residual)?;
    cfg.fo_bi_shared_conv = get_bool(kv, "fo_bi_shared_conv", cfg.fo_bi_shared_conv)?;
    cfg.d_skip_init = get_parsed(kv, "d_skip_init", cfg.d_skip_init)?;
    Ok(cfg)
}

pub fn model_to_kv(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("dim".into(), cfg.dim.to_string()),
        ("layers".into(), cfg.layers.to_string()),
        ("variant".into(), cfg.variant.as_str().into()),
        ("directionality".into(), cfg.directionality.as_str().into()),
        ("num_classes".into(), cfg.num_classes.to_string()),
        ("freq_bins".into(), cfg.freq_bins.to_string()),
        ("time_frames".into(), cfg.time_frames.to_string()),
        ("patch_f".into(), cfg.patch_f.to_string()),
        ("patch_t".into(), cfg.patch_t.to_string()),
        ("ffn_dim".into(), cfg.ffn_dim.to_string()),
        ("class_token_pos".into(), cfg.class_token_pos.as_str().into()),
        ("n_state".into(), cfg.n_state.to_string()),
        ("conv_kernel".into(), cfg.conv_kernel.to_string()),
        ("expand".into(), cfg.expand.to_string()),
        ("double_residual".into(), cfg.double_residual.to_string()),
        ("fo_bi_shared_conv".into(), cfg.fo_bi_shared_conv.to_string()),
        ("d_skip_init".into(), cfg.d_skip_init.to_string()),
    ]
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig> {
        let kv = parse_kv(text)?;
        for key in kv.keys() {
            let known = MODEL_KEYS.contains(&key.as_str())
                || TRAIN_KEYS.contains(&key.as_str())
                || AUGMENT_KEYS.contains(&key.as_str())
                || key == "task";
            if !known {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        let model = model_from_kv(&kv)?;
        let dt = TrainConfig::default();
        let grad_clip = get_parsed(&kv, "grad_clip", 0.0f32)?;
        let early = get_parsed(&kv, "early_stop_train_acc", 0.0f32)?;
        let train = TrainConfig {
            epochs: get_parsed(&kv, "epochs", dt.epochs)?,
            batch_size: get_parsed(&kv, "batch_size", dt.batch_size)?,
            lr0: get_parsed(&kv, "lr0", dt.lr0)?,
            warmup_epochs: get_parsed(&kv, "warmup_epochs", dt.warmup_epochs)?,
            weight_decay: get_parsed(&kv, "weight_decay", dt.weight_decay)?,
            label_smoothing: get_parsed(&kv, "label_smoothing", dt.label_smoothing)?,
            seed: get_parsed(&kv, "seed", dt.seed)?,
            runs: get_parsed(&kv, "runs", dt.runs)?,
            grad_clip: (grad_clip > 0.0).then_some(grad_clip),
            early_stop_train_acc: (early > 0.0).then_some(early),
        };
        let da = AugmentConfig::default();
        let augment = AugmentConfig {
            shift_ms: get_parsed(&kv, "shift_ms", da.shift_ms)?,
            resample_lo: get_parsed(&kv, "resample_lo", da.resample_lo)?,
            resample_hi: get_parsed(&kv, "resample_hi", da.resample_hi)?,
            noise_volume: get_parsed(&kv, "noise_volume", da.noise_volume)?,
            noise_prob: get_parsed(&kv, "noise_prob", da.noise_prob)?,
            time_masks: get_parsed(&kv, "time_masks", da.time_masks)?,
            time_mask_max: get_parsed(&kv, "time_mask_max", da.time_mask_max)?,
            freq_masks: get_parsed(&kv, "freq_masks", da.freq_masks)?,
            freq_mask_max: get_parsed(&kv, "freq_mask_max", da.freq_mask_max)?,
        };
        let task = match kv.get("task") {
            Some(v) => LabelTask::parse(v)?,
            None => LabelTask::V2_12,
        };
        Ok(FileConfig {
            model,
            train,
            augment,
            augment_enabled: get_bool(&kv, "augment", true)?,
            task,
        })
    }

    pub fn load(path: &Path) -> Result<FileConfig> {
        FileConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialization; parsing it back reproduces the config.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<(String, String)> = model_to_kv(&self.model);
        let t = &self.train;
        lines.extend([
            ("epochs".into(), t.epochs.to_string()),
            ("batch_size".into(), t.batch_size.to_string()),
            ("lr0".into(), t.lr0.to_string()),
            ("warmup_epochs".into(), t.warmup_epochs.to_string()),
            ("weight_decay".into(), t.weight_decay.to_string()),
            ("label_smoothing".into(), t.label_smoothing.to_string()),
            ("seed".into(), t.seed.to_string()),
            ("runs".into(), t.runs.to_string()),
            ("grad_clip".into(), t.grad_clip.unwrap_or(0.0).to_string()),
            (
                "early_stop_train_acc".into(),
                t.early_stop_train_acc.unwrap_or(0.0).to_string(),
            ),
        ]);
        let a = &self.augment;
        lines.extend([
            ("augment".into(), self.augment_enabled.to_string()),
            ("shift_ms".into(), a.shift_ms.to_string()),
            ("resample_lo".into(), a.resample_lo.to_string()),
            ("resample_hi".into(), a.resample_hi.to_string()),
            ("noise_volume".into(), a.noise_volume.to_string()),
            ("noise_prob".into(), a.noise_prob.to_string()),
            ("time_masks".into(), a.time_masks.to_string()),
            ("time_mask_max".into(), a.time_mask_max.to_string()),
            ("freq_masks".into(), a.freq_masks.to_string()),
            ("freq_mask_max".into(), a.freq_mask_max.to_string()),
            ("task".into(), self.task.as_str().into()),
        ]);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_text().as_bytes()))
    }
}

/// Stable hash over a (model, train) pair for run reports.
pub fn hash_for(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut text = String::new();
    for (k, v) in model_to_kv(model) {
        text.push_str(&format!("{k}={v};"));
    }
    text.push_str(&format!(
        "epochs={};batch={};lr0={};warmup={};wd={};ls={};seed={};",
        train.epochs,
        train.batch_size,
        train.lr0,
        train.warmup_epochs,
        train.weight_decay,
        train.label_smoothing,
        train.seed
    ));
    format!("{:016x}", fnv1a(text.as_bytes()))
}
