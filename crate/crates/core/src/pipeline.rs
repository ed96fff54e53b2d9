//! File-based pipeline stages: synthesize, fit the intensity codebook,
//! encode, train, restore and evaluate.
//!
//! Each stage reads one directory (`data`) and writes another (`out`).
//! Every directory carries a `manifest.toml` listing its volumes by split,
//! and every stage writes its fully resolved configuration to
//! `out/config.<stage>.toml` before doing any work.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoding::{encode, fit_codebook, mode_pool, IntensityCodebook, KMeansConfig, KMeansFit};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, validation_threshold, MetricsReport, Subject};
use crate::restore::{anomaly_score, postprocess_as, restore_volume, retrieve_latent, InferConfig};
use crate::scalar::{norm_sq, Scalar};
use crate::synth::{write_dataset, Manifest, ManifestEntry, Split, SynthSpec};
use crate::train::{train_with, TrainConfig, TrainHistory};
use crate::volume::{clip_normalize, downsample, read_volume, write_atomic, write_volume, PreprocessSpec, Role, Volume};

pub const CODEBOOK_FILE: &str = "codebook.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.ifck";
pub const METRICS_FILE: &str = "metrics.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub min_size: usize,
    pub avg_size: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            min_size: 3,
            avg_size: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seed for every stage; copied into the stage configs on resolve.
    pub seed: u64,
    pub workers: usize,
    pub precision: Precision,
    /// Mode-pooling window for training volumes.
    pub mode_pool_train: usize,
    /// Mode-pooling window for validation and test volumes and masks.
    pub mode_pool_test: usize,
    /// Input directory of the stage.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub codebook: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Restore directory whose validation split sets the threshold.
    pub threshold_from: Option<PathBuf>,
    pub synth: SynthSpec,
    pub preprocess: PreprocessSpec,
    pub kmeans: KMeansConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub postprocess: PostprocessConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: 1,
            precision: Precision::F64,
            mode_pool_train: 2,
            mode_pool_test: 3,
            data: None,
            out: PathBuf::from("out"),
            codebook: None,
            checkpoint: None,
            threshold_from: None,
            synth: SynthSpec::default(),
            preprocess: PreprocessSpec::default(),
            kmeans: KMeansConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the shared seed and worker count into the stage configs.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.kmeans.seed = self.seed;
        self.train.seed = self.seed;
        self.infer.seed = self.seed;
        self.train.workers = self.workers;
        self.infer.workers = self.workers;
        self
    }

    fn data_dir(&self) -> Result<&Path> {
        let dir = self
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("no input directory given".into()))?;
        if !dir.is_dir() {
            return Err(Error::Config(format!("input directory {} does not exist", dir.display())));
        }
        Ok(dir)
    }

    /// Creates the output directory and records the resolved config.
    fn begin(&self, stage: &str) -> Result<PipelineConfig> {
        let config = self.clone().resolved();
        if config.workers < 1 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
        let path = config.out.join(format!("config.{stage}.toml"));
        write_atomic(&path, config.to_toml()?.as_bytes())?;
        info!("{stage}: writing to {}", config.out.display());
        Ok(config)
    }
}

fn write_text<T: Serialize>(path: &Path, value: &T, what: &'static str) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(what, e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::load(dir)
}

/// Generates the synthetic dataset into `out`.
pub fn run_synth(config: &PipelineConfig) -> Result<Manifest> {
    let config = config.begin("synth")?;
    let manifest = write_dataset(&config.synth, &config.out)?;
    info!("synth: {} volumes", manifest.entries.len());
    Ok(manifest)
}

fn preprocess(volume: &Volume, spec: &PreprocessSpec) -> Result<Volume> {
    let normalized = clip_normalize(volume, spec)?;
    match spec.target_dims {
        Some(dims) => downsample(&normalized, dims),
        None => Ok(normalized),
    }
}

#[derive(Debug, Serialize)]
struct KMeansReport<'a> {
    iterations: usize,
    converged: bool,
    sse_trace: &'a [f64],
}

/// Fits the codebook on every voxel of the training split of `data`.
pub fn run_fit_codebook(config: &PipelineConfig) -> Result<KMeansFit> {
    let config = config.begin("fit-codebook")?;
    let data = config.data_dir()?;
    let manifest = load_manifest(data)?;
    let mut samples = Vec::new();
    for entry in manifest.split(Split::Train) {
        let volume = preprocess(&read_volume(data.join(&entry.image))?, &config.preprocess)?;
        samples.extend(volume.data().iter().map(|&x| x as f64));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let fit = fit_codebook(&samples, &config.kmeans)?;
    fit.codebook.save(config.out.join(CODEBOOK_FILE))?;
    let report = KMeansReport {
        iterations: fit.sse_trace.len(),
        converged: fit.converged,
        sse_trace: &fit.sse_trace,
    };
    write_text(&config.out.join("kmeans.toml"), &report, "k-means report")?;
    info!(
        "fit-codebook: k = {}, {} iterations, centroids {:?}",
        fit.codebook.k,
        fit.sse_trace.len(),
        fit.codebook.centroids
    );
    Ok(fit)
}

fn encode_mask(mask: &Volume, spec: &PreprocessSpec, window: usize) -> Result<Volume> {
    let resized = match spec.target_dims {
        Some(dims) if dims != mask.dims() => {
            let scores = Volume::new(mask.dims(), Role::Score, mask.data().to_vec())?;
            let small = downsample(&scores, dims)?;
            let bits: Vec<bool> = small.data().iter().map(|&x| x >= 0.5).collect();
            Volume::from_mask(dims, &bits)?
        }
        _ => mask.clone(),
    };
    mode_pool(&resized, window)
}

/// Preprocesses, encodes and mode-pools every volume of `data`.
pub fn run_encode(config: &PipelineConfig) -> Result<Manifest> {
    let config = config.begin("encode")?;
    let data = config.data_dir()?;
    let codebook_path = config
        .codebook
        .clone()
        .ok_or_else(|| Error::Config("encode needs a codebook".into()))?;
    let codebook = IntensityCodebook::load(&codebook_path)?;
    let manifest = load_manifest(data)?;
    let mut out = Manifest::default();
    for entry in &manifest.entries {
        let window = match entry.split {
            Split::Train => config.mode_pool_train,
            Split::Val | Split::Test => config.mode_pool_test,
        };
        let volume = preprocess(&read_volume(data.join(&entry.image))?, &config.preprocess)?;
        let labels = mode_pool(&encode(&volume, &codebook)?, window)?;
        let image = PathBuf::from(format!("{}.labels.vol", entry.id));
        write_volume(&labels, config.out.join(&image))?;
        let mask = match &entry.mask {
            Some(path) => {
                let pooled = encode_mask(&read_volume(data.join(path))?, &config.preprocess, window)?;
                let name = PathBuf::from(format!("{}.mask.vol", entry.id));
                write_volume(&pooled, config.out.join(&name))?;
                Some(name)
            }
            None => None,
        };
        out.entries.push(ManifestEntry {
            id: entry.id.clone(),
            split: entry.split,
            image,
            mask,
        });
    }
    codebook.save(config.out.join(CODEBOOK_FILE))?;
    out.save(&config.out)?;
    info!("encode: {} volumes, C = {}", out.entries.len(), codebook.k);
    Ok(out)
}

fn read_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<(ManifestEntry, Volume)>> {
    manifest
        .split(split)
        .map(|e| Ok((e.clone(), read_volume(dir.join(&e.image))?)))
        .collect()
}

/// Class count recorded next to encoded volumes, if any.
fn encoded_classes(dir: &Path) -> Result<Option<usize>> {
    let path = dir.join(CODEBOOK_FILE);
    if path.exists() {
        Ok(Some(IntensityCodebook::load(path)?.classes()))
    } else {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: TrainHistory,
}

/// Trains on the training split of the encoded directory `data`.
pub fn run_train(config: &PipelineConfig) -> Result<TrainSummary> {
    let mut config = config.begin("train")?;
    let data = config.data_dir()?.to_path_buf();
    if let Some(classes) = encoded_classes(&data)? {
        if classes != config.train.arch.classes {
            info!("train: using C = {classes} from the codebook");
            config.train.arch.classes = classes;
            let path = config.out.join("config.train.toml");
            write_atomic(&path, config.to_toml()?.as_bytes())?;
        }
    }
    let manifest = load_manifest(&data)?;
    let volumes: Vec<Volume> = read_split(&data, &manifest, Split::Train)?
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let checkpoint = config.out.join(CHECKPOINT_FILE);
    let history = match config.precision {
        Precision::F64 => train_stage::<f64>(&config.train, &volumes, &checkpoint)?,
        Precision::F32 => train_stage::<f32>(&config.train, &volumes, &checkpoint)?,
    };
    write_text(&config.out.join("loss.toml"), &history, "loss history")?;
    Ok(TrainSummary { checkpoint, history })
}

fn train_stage<S: Scalar>(config: &TrainConfig, volumes: &[Volume], path: &Path) -> Result<TrainHistory> {
    let log_every = (config.epochs / 20).max(1);
    let (model, latents, history) = train_with::<S, _>(volumes, config, |state| {
        let done = state.epoch + 1;
        if done % log_every == 0 || done == config.epochs {
            info!(
                "train: epoch {done}/{} objective {:.6} data {:.6}",
                config.epochs,
                state.history.objective[state.epoch],
                state.history.data_loss[state.epoch]
            );
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.epochs {
            Checkpoint::new(config.clone(), done, state.model.clone(), state.latents.clone())?.save(path)?;
        }
        Ok(())
    })?;
    Checkpoint::new(config.clone(), config.epochs, model, latents)?.save(path)?;
    Ok(history)
}

/// Per-volume outcome of the restore stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreSummary {
    pub id: String,
    pub split: Split,
    pub steps: usize,
    /// Objective per voxel over the whole volume at the final code.
    pub final_objective: f64,
    pub latent_norm: f64,
    pub mean_score: f64,
    /// Objective on the held point set before and after optimization.
    pub held_initial: Option<f64>,
    pub held_final: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RestoreReport {
    volume: Vec<RestoreSummary>,
}

/// Restores every validation and test volume of `data` with the trained
/// checkpoint and writes raw and post-processed anomaly maps.
pub fn run_restore(config: &PipelineConfig) -> Result<Vec<RestoreSummary>> {
    let config = config.begin("restore")?;
    match config.precision {
        Precision::F64 => restore_stage::<f64>(&config),
        Precision::F32 => restore_stage::<f32>(&config),
    }
}

fn restore_stage<S: Scalar>(config: &PipelineConfig) -> Result<Vec<RestoreSummary>> {
    let data = config.data_dir()?;
    let path = config
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("restore needs a checkpoint".into()))?;
    let checkpoint = Checkpoint::<S>::load(&path)?;
    let model = &checkpoint.model;
    if let Some(classes) = encoded_classes(data)? {
        if classes != model.arch.classes {
            return Err(Error::Config(format!(
                "codebook has C = {classes} classes but the checkpoint was trained with C = {}",
                model.arch.classes
            )));
        }
    }
    let manifest = load_manifest(data)?;
    let mut out = Manifest::default();
    let mut summaries = Vec::new();
    for (key, entry) in manifest.entries.iter().enumerate() {
        if entry.split == Split::Train {
            continue;
        }
        let volume = read_volume(data.join(&entry.image))?;
        let retrieval = retrieve_latent(model, &volume, key as u64, &config.infer)?;
        let map = anomaly_score(model, &retrieval.z, &volume, config.workers, config.infer.sigma)?;
        let restoration = restore_volume(model, &retrieval.z, volume.dims(), config.workers)?;
        let raw = map.to_volume()?;
        let post = postprocess_as(&raw, config.postprocess.min_size, config.postprocess.avg_size)?;

        let id = &entry.id;
        write_volume(&raw, config.out.join(format!("{id}.as.vol")))?;
        write_volume(&restoration, config.out.join(format!("{id}.restoration.vol")))?;
        let image = PathBuf::from(format!("{id}.as-post.vol"));
        write_volume(&post, config.out.join(&image))?;
        let mask = match &entry.mask {
            Some(m) => {
                let name = PathBuf::from(format!("{id}.mask.vol"));
                write_volume(&read_volume(data.join(m))?, config.out.join(&name))?;
                Some(name)
            }
            None => None,
        };
        out.entries.push(ManifestEntry {
            id: id.clone(),
            split: entry.split,
            image,
            mask,
        });

        let summary = RestoreSummary {
            id: id.clone(),
            split: entry.split,
            steps: retrieval.trace.len(),
            final_objective: map.objective.to_f64_lossy(),
            latent_norm: norm_sq(&retrieval.z).sqrt().to_f64_lossy(),
            mean_score: map.mean().to_f64_lossy(),
            held_initial: retrieval.held.map(|h| h.0.to_f64_lossy()),
            held_final: retrieval.held.map(|h| h.1.to_f64_lossy()),
        };
        info!(
            "restore: {id} objective {:.5} mean AS {:.5} |z| {:.4}",
            summary.final_objective, summary.mean_score, summary.latent_norm
        );
        summaries.push(summary);
    }
    out.save(&config.out)?;
    let report = RestoreReport { volume: summaries };
    write_text(&config.out.join("restore.toml"), &report, "restore summary")?;
    Ok(report.volume)
}

fn load_subjects(dir: &Path, split: Split) -> Result<Vec<Subject>> {
    let manifest = load_manifest(dir)?;
    manifest
        .split(split)
        .map(|e| {
            let mask = e
                .mask
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{} has no mask", e.id)))?;
            Subject::new(e.id.clone(), read_volume(dir.join(&e.image))?, read_volume(dir.join(mask))?)
        })
        .collect()
}

/// Picks the threshold on the validation split (of `threshold_from`, or of
/// `data` itself) and scores the test split of the restore directory `data`.
pub fn run_eval(config: &PipelineConfig) -> Result<MetricsReport> {
    let config = config.begin("eval")?;
    let data = config.data_dir()?;
    let test = load_subjects(data, Split::Test)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument(format!("test split of {} is empty", data.display())));
    }
    let val_dir = config.threshold_from.as_deref().unwrap_or(data);
    let val = load_subjects(val_dir, Split::Val)?;
    if val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "validation split of {} is empty",
            val_dir.display()
        )));
    }
    let threshold = validation_threshold(&val)?;
    let report = evaluate(&test, threshold)?;
    write_atomic(&config.out.join(METRICS_FILE), report.to_text()?.as_bytes())?;
    info!(
        "eval: [DICE] {:.4} DICE {:.4} ± {:.4} AP {:.4} AUROC {:.4} FPR@95R {:.4}",
        report.best_dice, report.dice_mean, report.dice_std, report.ap, report.auroc, report.fpr_at_95_recall
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_partial_sections() {
        let config = PipelineConfig::default();
        let text = config.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), config);

        let partial = PipelineConfig::from_toml("seed = 7\n[train]\nepochs = 3\nhidden = 16\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.arch.hidden, 16);
        assert_eq!(partial.train.points_per_volume, 16_200);
        let resolved = partial.resolved();
        assert_eq!(resolved.train.seed, 7);
        assert_eq!(resolved.infer.seed, 7);
        assert!(PipelineConfig::from_toml("[train]\nepochs = \"x\"\n").is_err());
    }

    #[test]
    fn missing_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            out: dir.path().join("out"),
            data: Some(dir.path().join("missing")),
            ..PipelineConfig::default()
        };
        assert!(matches!(run_train(&config), Err(Error::Config(_))));
        assert!(dir.path().join("out/config.train.toml").exists());
    }
}
