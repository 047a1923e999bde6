//! Google Speech Commands ingestion: directory scanning, label vocabularies
//! for the 12/30/35-way tasks, speaker-stable split manifests, silence and
//! unknown synthesis, and batch production.
//!
//! Split assignment hashes the speaker id (the filename prefix before the
//! first underscore) into 80:10:10 buckets, so no speaker ever appears in two
//! splits. Background-noise material is partitioned the same way by time
//! region within each clip (first 80% train, next 10% validation, last 10%
//! test): both synthesized silence crops and augmentation noise for a split
//! come only from that split's region.

use crate::augment::{augment_waveform, spec_augment, AugmentConfig, AUGMENT_SAMPLES};
use crate::error::{Error, Result};
use crate::features::{load_wav, mfcc, Waveform, MFCC_BINS, MFCC_FRAMES};
use crate::rng::{fnv1a, mix, rng_from_seed, shuffle, uniform_usize};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub const NOISE_DIR: &str = "_background_noise_";

/// The ten command words of the 12-label task, in the canonical order,
/// followed by silence and unknown.
pub const CORE_WORDS: [&str; 10] = [
    "up", "down", "left", "right", "yes", "no", "on", "off", "go", "stop",
];
pub const SILENCE_LABEL: &str = "silence";
pub const UNKNOWN_LABEL: &str = "unknown";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelTask {
    V1_12,
    V1_30,
    V2_12,
    V2_35,
}

impl LabelTask {
    pub fn parse(s: &str) -> Result<LabelTask> {
        match s.to_ascii_lowercase().as_str() {
            "v1-12" => Ok(LabelTask::V1_12),
            "v1-30" => Ok(LabelTask::V1_30),
            "v2-12" => Ok(LabelTask::V2_12),
            "v2-35" => Ok(LabelTask::V2_35),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LabelTask::V1_12 => "v1-12",
            LabelTask::V1_30 => "v1-30",
            LabelTask::V2_12 => "v2-12",
            LabelTask::V2_35 => "v2-35",
        }
    }

    /// Whether this is a 12-way task (core words + silence + unknown).
    pub fn is_core12(&self) -> bool {
        matches!(self, LabelTask::V1_12 | LabelTask::V2_12)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the dataset root. Synthesized silence entries carry a
    /// `#<sample_offset>` fragment selecting a one-second crop of the noise
    /// clip.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub task: LabelTask,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

/// Speaker-stable 80:10:10 bucket assignment.
pub fn split_for_speaker(speaker: &str) -> Split {
    match fnv1a(speaker.as_bytes()) % 100 {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

/// Speaker id: the filename prefix before the first underscore.
fn speaker_of(file_name: &str) -> &str {
    file_name.split('_').next().unwrap_or(file_name)
}

fn sorted_wavs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".wav") && entry.file_type()?.is_file() {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

fn word_dirs(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != NOISE_DIR && !name.starts_with('.') {
                out.push(name);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Time region of a noise clip reserved for a split: [0, 0.8L) train,
/// [0.8L, 0.9L) validation, [0.9L, L) test.
pub fn noise_region(total_samples: usize, split: Split) -> (usize, usize) {
    let lo8 = total_samples * 8 / 10;
    let lo9 = total_samples * 9 / 10;
    match split {
        Split::Train => (0, lo8),
        Split::Val => (lo8, lo9),
        Split::Test => (lo9, total_samples),
    }
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Builds the split manifest for a Speech Commands layout.
///
/// For 12-way tasks, files of non-target words become `unknown` candidates
/// and are downsampled (per split) to the mean per-target-class count;
/// `silence` examples of the same count are synthesized as one-second crops
/// of the background-noise clips, drawn from the split's own time region.
pub fn build_manifest(root: &Path, task: LabelTask, seed: u64) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    // word folders are exactly the directories that hold wav files; anything
    // else (cache dirs, stray folders) is ignored
    let mut words = Vec::new();
    let mut word_files: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for dir in word_dirs(root)? {
        let files = sorted_wavs(&root.join(&dir))?;
        if !files.is_empty() {
            word_files.insert(dir.clone(), files);
            words.push(dir);
        }
    }
    if words.is_empty() {
        return Err(Error::Data(format!(
            "no word directories under {}",
            root.display()
        )));
    }

    let classes: Vec<String> = if task.is_core12() {
        CORE_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain([SILENCE_LABEL.to_string(), UNKNOWN_LABEL.to_string()])
            .collect()
    } else {
        words.clone()
    };
    let class_id: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut unknown_pool: BTreeMap<Split, Vec<String>> = BTreeMap::new();
    let mut target_counts: BTreeMap<Split, Vec<usize>> =
        SPLITS.iter().map(|&s| (s, vec![0usize; 10])).collect();

    for word in &words {
        for file in &word_files[word] {
            let split = split_for_speaker(speaker_of(file));
            let rel = format!("{word}/{file}");
            if task.is_core12() {
                if let Some(pos) = CORE_WORDS.iter().position(|w| w == word) {
                    target_counts.get_mut(&split).unwrap()[pos] += 1;
                    entries.push(ManifestEntry {
                        path: rel,
                        label: pos,
                        split,
                    });
                } else {
                    unknown_pool.entry(split).or_default().push(rel);
                }
            } else {
                entries.push(ManifestEntry {
                    path: rel,
                    label: class_id[word.as_str()],
                    split,
                });
            }
        }
    }

    if task.is_core12() {
        let noise_dir = root.join(NOISE_DIR);
        if !noise_dir.is_dir() {
            return Err(Error::Data(format!(
                "task {} needs silence examples but {} is missing",
                task.as_str(),
                noise_dir.display()
            )));
        }
        let noise_files = sorted_wavs(&noise_dir)?;
        if noise_files.is_empty() {
            return Err(Error::Data("no background noise clips found".into()));
        }
        let noise_lens: Vec<usize> = noise_files
            .iter()
            .map(|f| Ok(load_wav(noise_dir.join(f))?.samples.len()))
            .collect::<Result<_>>()?;

        let silence_id = class_id[SILENCE_LABEL];
        let unknown_id = class_id[UNKNOWN_LABEL];
        for (split_idx, &split) in SPLITS.iter().enumerate() {
            let counts = &target_counts[&split];
            let mean = (counts.iter().sum::<usize>() as f64 / 10.0).round() as usize;

            // unknown: seeded downsample of the non-target pool
            let mut pool = unknown_pool.remove(&split).unwrap_or_default();
            let mut rng = rng_from_seed(mix(&[seed, 0xdead, split_idx as u64]));
            shuffle(&mut rng, &mut pool);
            pool.truncate(mean);
            pool.sort();
            for path in pool {
                entries.push(ManifestEntry {
                    path,
                    label: unknown_id,
                    split,
                });
            }

            // silence: crops from this split's region of each clip
            let mut rng = rng_from_seed(mix(&[seed, 0x51fe, split_idx as u64]));
            for i in 0..mean {
                let fi = i % noise_files.len();
                let (lo, hi) = noise_region(noise_lens[fi], split);
                if hi < lo + AUGMENT_SAMPLES {
                    return Err(Error::Data(format!(
                        "noise clip {} too short for disjoint {} crops",
                        noise_files[fi],
                        split.as_str()
                    )));
                }
                let off = lo + uniform_usize(&mut rng, hi - lo - AUGMENT_SAMPLES + 1);
                entries.push(ManifestEntry {
                    path: format!("{NOISE_DIR}/{}#{off}", noise_files[fi]),
                    label: silence_id,
                    split,
                });
            }
        }
    }

    Ok(Manifest {
        task,
        classes,
        entries,
    })
}

impl Manifest {
    pub fn len_of(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn entries_of(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// CSV serialization: a header comment carrying task and classes, then
    /// `path,label,split` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# task: {}\n", self.task.as_str()));
        out.push_str(&format!("# classes: {}\n", self.classes.join(",")));
        out.push_str("path,label,split\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.path, e.label, e.split.as_str()));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let mut task = None;
        let mut classes = Vec::new();
        let mut entries = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# task: ") {
                task = Some(LabelTask::parse(rest.trim())?);
            } else if let Some(rest) = line.strip_prefix("# classes: ") {
                classes = rest.split(',').map(|s| s.to_string()).collect();
            } else if line.starts_with('#') || line == "path,label,split" || line.is_empty() {
                continue;
            } else {
                let mut parts = line.rsplitn(3, ',');
                let split = Split::parse(parts.next().ok_or_else(|| {
                    Error::Data(format!("malformed manifest line `{line}`"))
                })?)?;
                let label: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("malformed manifest line `{line}`")))?;
                let path = parts
                    .next()
                    .ok_or_else(|| Error::Data(format!("malformed manifest line `{line}`")))?
                    .to_string();
                entries.push(ManifestEntry { path, label, split });
            }
        }
        Ok(Manifest {
            task: task.ok_or_else(|| Error::Data("manifest missing task header".into()))?,
            classes,
            entries,
        })
    }
}

/// One batch of featurized examples.
pub struct Batch {
    pub features: Tensor, // [B, 40, 98]
    pub labels: Vec<usize>,
}

/// Anything that can feed the training loop with batches.
pub trait BatchSource: Sync {
    fn num_classes(&self) -> usize;
    fn len_of(&self, split: Split) -> usize;
    /// Batches for one pass. The train split is reshuffled per epoch
    /// (deterministically in the source's seed); validation and test are
    /// served in a fixed order with no augmentation. A final short batch is
    /// emitted as-is.
    fn batches<'a>(
        &'a self,
        split: Split,
        batch_size: usize,
        epoch: usize,
    ) -> Result<Box<dyn Iterator<Item = Result<Batch>> + 'a>>;
}

// ---------------------------------------------------------------------------
// In-memory source (smoke training, tests)
// ---------------------------------------------------------------------------

/// Pre-featurized examples served to every split; the train pass reshuffles
/// per epoch, eval passes keep insertion order.
pub struct InMemoryData {
    features: Vec<f32>, // [N, 40, 98] row-major
    labels: Vec<usize>,
    classes: usize,
    seed: u64,
    train_only: bool,
}

impl InMemoryData {
    pub fn new(features: Vec<f32>, labels: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        if features.len() != labels.len() * MFCC_BINS * MFCC_FRAMES {
            return Err(Error::Data(format!(
                "feature buffer holds {} floats for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(InMemoryData {
            features,
            labels,
            classes,
            seed,
            train_only: false,
        })
    }

    /// Fixed random examples with seeded uniform features and labels.
    pub fn synthetic(n: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let features: Vec<f32> = (0..n * MFCC_BINS * MFCC_FRAMES)
            .map(|_| crate::rng::uniform_in(&mut rng, -1.0, 1.0))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| uniform_usize(&mut rng, classes)).collect();
        InMemoryData {
            features,
            labels,
            classes,
            seed,
            train_only: false,
        }
    }

    /// Balanced synthetic set: label i % classes.
    pub fn synthetic_balanced(n: usize, classes: usize, seed: u64) -> Self {
        let mut data = Self::synthetic(n, classes, seed);
        data.labels = (0..n).map(|i| i % classes).collect();
        data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Serve examples to the train split only (no validation or test passes);
    /// the loop then tracks accuracy from the training forwards alone.
    pub fn train_only(mut self) -> Self {
        self.train_only = true;
        self
    }
}

impl BatchSource for InMemoryData {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn len_of(&self, split: Split) -> usize {
        if self.train_only && split != Split::Train {
            0
        } else {
            self.labels.len()
        }
    }

    fn batches<'a>(
        &'a self,
        split: Split,
        batch_size: usize,
        epoch: usize,
    ) -> Result<Box<dyn Iterator<Item = Result<Batch>> + 'a>> {
        if batch_size == 0 {
            return Err(Error::Usage("batch_size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        if split == Split::Train {
            let mut rng = rng_from_seed(mix(&[self.seed, 0x0bda, epoch as u64]));
            shuffle(&mut rng, &mut order);
        }
        let per = MFCC_BINS * MFCC_FRAMES;
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
        Ok(Box::new(chunks.into_iter().map(move |idx| {
            let mut data = Vec::with_capacity(idx.len() * per);
            let mut labels = Vec::with_capacity(idx.len());
            for &i in &idx {
                data.extend_from_slice(&self.features[i * per..(i + 1) * per]);
                labels.push(self.labels[i]);
            }
            Ok(Batch {
                features: Tensor::from_vec(&[idx.len(), MFCC_BINS, MFCC_FRAMES], data)?,
                labels,
            })
        })))
    }
}

// ---------------------------------------------------------------------------
// On-disk Speech Commands source
// ---------------------------------------------------------------------------

struct EvalSet {
    labels: Vec<usize>,
    features: Vec<f32>, // [N, 40, 98]
}

pub struct SpeechCommandsData {
    root: PathBuf,
    pub manifest: Manifest,
    augment: Option<AugmentConfig>,
    seed: u64,
    cache_dir: Option<PathBuf>,
    noise_pool: Mutex<Option<std::sync::Arc<Vec<Waveform>>>>,
    eval_sets: Mutex<BTreeMap<&'static str, std::sync::Arc<EvalSet>>>,
}

const EVAL_CACHE_MAGIC: &[u8; 8] = b"KWMCACH1";

impl SpeechCommandsData {
    pub fn new(
        root: impl Into<PathBuf>,
        manifest: Manifest,
        augment: Option<AugmentConfig>,
        seed: u64,
    ) -> Self {
        SpeechCommandsData {
            root: root.into(),
            manifest,
            augment,
            seed,
            cache_dir: None,
            noise_pool: Mutex::new(None),
            eval_sets: Mutex::new(BTreeMap::new()),
        }
    }

    /// Enables the on-disk feature cache for the validation and test splits.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    fn pipeline_hash(&self, split: Split) -> u64 {
        let mut desc = format!(
            "mfcc40x98/hann480/hop160/fft512/mel20-8000/dct-ortho|{}|{}",
            self.manifest.task.as_str(),
            split.as_str()
        );
        for e in self.manifest.entries_of(split) {
            desc.push_str(&e.path);
            desc.push(',');
            desc.push_str(&e.label.to_string());
            desc.push(';');
        }
        fnv1a(desc.as_bytes())
    }

    /// Resolves a manifest entry to a one-second-or-shorter waveform.
    fn load_entry(&self, entry: &ManifestEntry) -> Result<Waveform> {
        match entry.path.split_once('#') {
            Some((file, off)) => {
                let offset: usize = off.parse().map_err(|_| {
                    Error::Data(format!("bad crop offset in `{}`", entry.path))
                })?;
                let clip = load_wav(self.root.join(file))?;
                if offset + AUGMENT_SAMPLES > clip.samples.len() {
                    return Err(Error::Data(format!(
                        "crop offset {offset} out of range in `{}`",
                        entry.path
                    )));
                }
                Ok(Waveform {
                    samples: clip.samples[offset..offset + AUGMENT_SAMPLES].to_vec(),
                    sample_rate: clip.sample_rate,
                })
            }
            None => load_wav(self.root.join(&entry.path)),
        }
    }

    /// Noise clips sliced to the train region, for train-time augmentation.
    fn train_noise_pool(&self) -> Result<std::sync::Arc<Vec<Waveform>>> {
        let mut slot = self.noise_pool.lock().unwrap();
        if let Some(pool) = slot.as_ref() {
            return Ok(pool.clone());
        }
        let dir = self.root.join(NOISE_DIR);
        let mut pool = Vec::new();
        if dir.is_dir() {
            for file in sorted_wavs(&dir)? {
                let w = load_wav(dir.join(&file))?;
                let (lo, hi) = noise_region(w.samples.len(), Split::Train);
                if hi >= lo + AUGMENT_SAMPLES {
                    pool.push(Waveform {
                        samples: w.samples[lo..hi].to_vec(),
                        sample_rate: w.sample_rate,
                    });
                }
            }
        }
        let pool = std::sync::Arc::new(pool);
        *slot = Some(pool.clone());
        Ok(pool)
    }

    fn eval_cache_path(&self, split: Split) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| {
            d.join(format!(
                "{}-{:016x}.bin",
                split.as_str(),
                self.pipeline_hash(split)
            ))
        })
    }

    fn load_eval_cache(path: &Path, expected: usize) -> Option<EvalSet> {
        let bytes = std::fs::read(path).ok()?;
        if bytes.len() < 12 || &bytes[0..8] != EVAL_CACHE_MAGIC {
            return None;
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().ok()?) as usize;
        if count != expected {
            return None;
        }
        let per = MFCC_BINS * MFCC_FRAMES;
        let need = 12 + count * (4 + per * 4);
        if bytes.len() != need {
            return None;
        }
        let mut labels = Vec::with_capacity(count);
        let mut features = Vec::with_capacity(count * per);
        let mut pos = 12usize;
        for _ in 0..count {
            labels.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().ok()?) as usize);
            pos += 4;
            for _ in 0..per {
                features.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().ok()?));
                pos += 4;
            }
        }
        Some(EvalSet { labels, features })
    }

    fn store_eval_cache(path: &Path, set: &EvalSet) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let per = MFCC_BINS * MFCC_FRAMES;
        let mut out = Vec::with_capacity(12 + set.labels.len() * (4 + per * 4));
        out.extend_from_slice(EVAL_CACHE_MAGIC);
        out.extend_from_slice(&(set.labels.len() as u32).to_le_bytes());
        for (i, &label) in set.labels.iter().enumerate() {
            out.extend_from_slice(&(label as u32).to_le_bytes());
            for &v in &set.features[i * per..(i + 1) * per] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Featurizes an eval split once (disk-cached when a cache dir is set).
    fn eval_set(&self, split: Split) -> Result<std::sync::Arc<EvalSet>> {
        let key = split.as_str();
        if let Some(set) = self.eval_sets.lock().unwrap().get(key) {
            return Ok(set.clone());
        }
        let entries = self.manifest.entries_of(split);
        if let Some(path) = self.eval_cache_path(split) {
            if let Some(set) = Self::load_eval_cache(&path, entries.len()) {
                let set = std::sync::Arc::new(set);
                self.eval_sets.lock().unwrap().insert(key, set.clone());
                return Ok(set);
            }
        }
        // Workers featurize, order is restored by index.
        let rows: Vec<Result<(usize, Vec<f32>)>> = entries
            .par_iter()
            .map(|e| {
                let w = self.load_entry(e)?;
                let m = mfcc(&w)?;
                Ok((e.label, m.coeffs.data().to_vec()))
            })
            .collect();
        let per = MFCC_BINS * MFCC_FRAMES;
        let mut labels = Vec::with_capacity(entries.len());
        let mut features = Vec::with_capacity(entries.len() * per);
        let total = entries.len();
        let mut skipped = 0usize;
        for (row, entry) in rows.into_iter().zip(&entries) {
            match row {
                Ok((label, coeffs)) => {
                    labels.push(label);
                    features.extend_from_slice(&coeffs);
                }
                Err(err) => {
                    skipped += 1;
                    eprintln!("skipping {}: {err}", entry.path);
                }
            }
        }
        if skipped * 100 > total {
            return Err(Error::Data(format!(
                "{skipped} of {total} {} examples unreadable (over 1%)",
                split.as_str()
            )));
        }
        let set = std::sync::Arc::new(EvalSet { labels, features });
        if let Some(path) = self.eval_cache_path(split) {
            Self::store_eval_cache(&path, &set)?;
        }
        self.eval_sets.lock().unwrap().insert(key, set.clone());
        Ok(set)
    }
}

impl BatchSource for SpeechCommandsData {
    fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    fn len_of(&self, split: Split) -> usize {
        self.manifest.len_of(split)
    }

    fn batches<'a>(
        &'a self,
        split: Split,
        batch_size: usize,
        epoch: usize,
    ) -> Result<Box<dyn Iterator<Item = Result<Batch>> + 'a>> {
        if batch_size == 0 {
            return Err(Error::Usage("batch_size must be positive".into()));
        }
        let per = MFCC_BINS * MFCC_FRAMES;

        if split != Split::Train {
            let set = self.eval_set(split)?;
            let n = set.labels.len();
            let batches: Vec<(usize, usize)> = (0..n)
                .step_by(batch_size)
                .map(|s| (s, (s + batch_size).min(n)))
                .collect();
            return Ok(Box::new(batches.into_iter().map(move |(s, e)| {
                Ok(Batch {
                    features: Tensor::from_vec(
                        &[e - s, MFCC_BINS, MFCC_FRAMES],
                        set.features[s * per..e * per].to_vec(),
                    )?,
                    labels: set.labels[s..e].to_vec(),
                })
            })));
        }

        // train: per-epoch shuffle, streamed featurization with augmentation
        let entries: Vec<ManifestEntry> = self
            .manifest
            .entries_of(Split::Train)
            .into_iter()
            .cloned()
            .collect();
        let total = entries.len();
        let mut order: Vec<usize> = (0..total).collect();
        let mut rng = rng_from_seed(mix(&[self.seed, 0x0bda, epoch as u64]));
        shuffle(&mut rng, &mut order);
        let noise_pool = if self.augment.is_some() {
            self.train_noise_pool()?
        } else {
            std::sync::Arc::new(Vec::new())
        };
        let augment = self.augment.clone();
        let seed = self.seed;
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
        let skipped = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));

        Ok(Box::new(chunks.into_iter().map(move |idx| {
            // Workers own per-example RNG streams seeded by (seed, epoch,
            // example index), so multi-worker loading is reproducible
            // regardless of scheduling.
            let rows: Vec<Option<(usize, Vec<f32>)>> = idx
                .par_iter()
                .map(|&i| {
                    let entry = &entries[i];
                    let run = || -> Result<(usize, Vec<f32>)> {
                        let w = self.load_entry(entry)?;
                        let m = match &augment {
                            Some(cfg) => {
                                let mut ex_rng =
                                    rng_from_seed(mix(&[seed, epoch as u64, i as u64]));
                                let aw = augment_waveform(&w, &noise_pool, cfg, &mut ex_rng)?;
                                spec_augment(&mfcc(&aw)?, cfg, &mut ex_rng)
                            }
                            None => mfcc(&w)?,
                        };
                        Ok((entry.label, m.coeffs.data().to_vec()))
                    };
                    match run() {
                        Ok(row) => Some(row),
                        Err(err) => {
                            eprintln!("skipping {}: {err}", entry.path);
                            None
                        }
                    }
                })
                .collect();
            let mut data = Vec::with_capacity(idx.len() * per);
            let mut labels = Vec::with_capacity(idx.len());
            for row in rows.into_iter().flatten() {
                labels.push(row.0);
                data.extend_from_slice(&row.1);
            }
            let bad = idx.len() - labels.len();
            if bad > 0 {
                let so_far = skipped.fetch_add(bad, std::sync::atomic::Ordering::SeqCst) + bad;
                if so_far * 100 > total {
                    return Err(Error::Data(format!(
                        "{so_far} of {total} train examples unreadable (over 1%)"
                    )));
                }
            }
            Ok(Batch {
                features: Tensor::from_vec(&[labels.len(), MFCC_BINS, MFCC_FRAMES], data)?,
                labels,
            })
        })))
    }
}
