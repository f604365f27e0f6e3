//! Run configuration and the commands behind the `promptforge` binary.
//!
//! A run is described by one JSON document ([`RunConfig`]). Every field has
//! a default, a named preset can replace the defaults, and `--set a.b=v`
//! overrides single keys after the file is read. Every output file carries
//! the SHA-256 fingerprint of the resolved config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, EncoderWeights};
use crate::episodes::{
    episode_for, evaluate, generate_synthetic_domain, load_dataset, Dataset, EpisodeConfig, EvalOptions, EvalReport,
    SyntheticDomainSpec,
};
use crate::losses::{grad_check_suite, GradCheckOptions, GradCheckResult, LossKind};
use crate::pipeline::{
    encode_images, train_episode, FeatureRole, PipelineConfig, PipelineMethod, TextFeatureCache, Variant,
};
use crate::semantic::{DescriptionCorpus, SelectionConfig};
use crate::{Error, Result};

/// Caps the worker count of every command.
pub const THREADS_ENV: &str = "PROMPTFORGE_THREADS";

pub const PRESETS: [&str; 3] = ["desk", "paper-1shot", "paper-5shot"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory written by `export_dataset`; replaces the generator when set.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticDomainSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub encoder_seed: u64,
    /// PFW1 weight file; its own config block replaces `encoder`.
    pub weights: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub episode: EpisodeConfig,
    pub dataset: DatasetConfig,
    /// Description corpus replacing the dataset's own.
    pub corpus: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// 0 picks the thread-pool default.
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset("desk").expect("desk preset exists")
    }
}

impl RunConfig {
    /// Named starting points. `desk` is the default and fits a laptop CPU;
    /// the `paper-*` presets keep the published schedule on the desk encoder.
    pub fn preset(name: &str) -> Result<Self> {
        let encoder = EncoderConfig {
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            patch_size: 8,
            image_size: 32,
            vocab_hash_buckets: 4096,
            max_text_len: 32,
        };
        let desk = PipelineConfig {
            n_v: 4,
            iterations: 10,
            lr_prompts: 1e-3,
            lr_adapter: 1e-3,
            lr_classifier: 1e-2,
            t_s: 4,
            selection: SelectionConfig {
                c: 24,
                m: 8,
                gamma_shape: 2.0,
                gamma_scale: 6.0,
            },
            feature_budget: Some(5),
            ..PipelineConfig::default()
        };
        let published = PipelineConfig {
            iterations: 60,
            lr_prompts: 1e-4,
            lr_adapter: 1e-4,
            lr_classifier: 1e-2,
            ..PipelineConfig::default()
        };
        let base = RunConfig {
            encoder,
            encoder_seed: 0,
            weights: None,
            pipeline: desk,
            episode: EpisodeConfig::default(),
            dataset: DatasetConfig::default(),
            corpus: None,
            seeds: vec![0],
            episodes: 100,
            workers: 0,
            out_dir: PathBuf::from("out"),
        };
        match name {
            "desk" => Ok(base),
            "paper-1shot" => Ok(RunConfig {
                pipeline: PipelineConfig {
                    n_v: 24,
                    feature_budget: Some(25),
                    ..published
                },
                ..base
            }),
            "paper-5shot" => Ok(RunConfig {
                pipeline: PipelineConfig {
                    n_v: 4,
                    feature_budget: Some(25),
                    ..published
                },
                episode: EpisodeConfig {
                    shots: 5,
                    ..EpisodeConfig::default()
                },
                ..base
            }),
            other => Err(Error::Config(vec![format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )])),
        }
    }

    /// Preset, then the JSON file merged over it, then dotted overrides.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = RunConfig::preset(preset.unwrap_or("desk"))?;
        let mut doc = serde_json::to_value(&base)?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
            merge(&mut doc, patch);
        }
        let mut errs = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut doc, o) {
                errs.push(e);
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(vec![format!("config: {e}")]))
    }

    /// Every problem at once, as a single config error.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut push = |r: Result<()>| {
            match r {
                Ok(()) => {}
                Err(Error::Config(list)) => errs.extend(list),
                Err(e) => errs.push(e.to_string()),
            }
        };
        for (key, path) in [
            ("weights", &self.weights),
            ("corpus", &self.corpus),
            ("dataset.path", &self.dataset.path),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    push(Err(Error::Config(vec![format!("{key}: path does not exist: {}", p.display())])));
                }
            }
        }
        if self.weights.is_none() {
            push(self.encoder.validate());
        }
        let ep = &self.episode;
        if ep.ways < 2 || ep.shots == 0 || ep.queries == 0 {
            push(Err(Error::Config(vec![format!(
                "episode needs ways >= 2, shots >= 1, queries >= 1 (got {}, {}, {})",
                ep.ways, ep.shots, ep.queries
            )])));
        }
        let mut descriptions = None;
        if self.dataset.path.is_none() {
            let spec = &self.dataset.synthetic;
            push(spec.validate());
            if self.weights.is_none() && spec.image_size != self.encoder.image_size {
                push(Err(Error::Config(vec![format!(
                    "dataset.synthetic.image_size ({}) must equal encoder.image_size ({})",
                    spec.image_size, self.encoder.image_size
                )])));
            }
            if spec.classes < ep.ways {
                push(Err(Error::Config(vec![format!(
                    "dataset.synthetic.classes ({}) is smaller than episode.ways ({})",
                    spec.classes, ep.ways
                )])));
            }
            if spec.images_per_class < ep.shots + ep.queries {
                push(Err(Error::Config(vec![format!(
                    "dataset.synthetic.images_per_class ({}) is smaller than shots + queries ({})",
                    spec.images_per_class,
                    ep.shots + ep.queries
                )])));
            }
            descriptions = Some(spec.descriptions_per_class);
        }
        if let Some(p) = self.corpus.as_ref().filter(|p| p.exists()) {
            match DescriptionCorpus::load(p) {
                Ok(c) => descriptions = Some(c.descriptions_per_class()),
                Err(e) => push(Err(Error::Config(vec![format!("corpus: {e}")]))),
            }
        }
        if let Some(n_s) = descriptions {
            push(self.pipeline.validate(ep.shots, n_s));
        }
        if self.seeds.is_empty() {
            push(Err(Error::Config(vec!["seeds must not be empty".into()])));
        }
        if self.episodes == 0 {
            push(Err(Error::Config(vec!["episodes must be >= 1".into()])));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 of the canonical JSON, ignoring fields that cannot change
    /// results (output directory, worker count).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.workers = 0;
        let json = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Requested workers capped by `PROMPTFORGE_THREADS`.
    pub fn effective_workers(&self) -> usize {
        let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
        match (self.workers, cap) {
            (0, Some(c)) => c,
            (w, Some(c)) => w.min(c),
            (w, None) => w,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
fn apply_override(doc: &mut Value, spec: &str) -> std::result::Result<(), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override {spec:?} is not of the form key.path=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("override {path:?}: {} is not an object", keys[..i].join(".")))?;
        if !obj.contains_key(*key) {
            return Err(format!("override {path:?}: unknown key {key:?}"));
        }
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*key).expect("checked");
    }
    Err(format!("override {spec:?} has an empty key"))
}

/// Dataset, frozen weights and text features for one resolved config.
pub struct Workspace {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub weights: EncoderWeights,
    pub text: TextFeatureCache,
    pub fingerprint: String,
}

impl Workspace {
    pub fn prepare(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let weights = match &config.weights {
            Some(p) => EncoderWeights::load(p)?,
            None => EncoderWeights::init_frozen(&config.encoder, config.encoder_seed)?,
        };
        let mut dataset = match &config.dataset.path {
            Some(p) => load_dataset(p)?,
            None => generate_synthetic_domain(&config.dataset.synthetic)?,
        };
        if let Some(p) = &config.corpus {
            let corpus = DescriptionCorpus::load(p)?;
            if corpus.classes.len() != dataset.num_classes() {
                return Err(Error::Config(vec![format!(
                    "corpus {} has {} classes, dataset has {}",
                    p.display(),
                    corpus.classes.len(),
                    dataset.num_classes()
                )]));
            }
            dataset.corpus = corpus;
        }
        if dataset.image_size() != weights.config().image_size {
            return Err(Error::Config(vec![format!(
                "dataset images are {} px, encoder expects {} px",
                dataset.image_size(),
                weights.config().image_size
            )]));
        }
        if dataset.num_classes() < config.episode.ways {
            return Err(Error::Config(vec![format!(
                "dataset has {} classes, episode.ways is {}",
                dataset.num_classes(),
                config.episode.ways
            )]));
        }
        let text = TextFeatureCache::build(&dataset.corpus, &weights)?;
        config
            .pipeline
            .validate(config.episode.shots, text.descriptions_per_class())?;
        let fingerprint = config.fingerprint();
        Ok(Workspace {
            config,
            dataset,
            weights,
            text,
            fingerprint,
        })
    }

    pub fn dataset_id(&self) -> String {
        match &self.config.dataset.path {
            Some(p) => p.display().to_string(),
            None => self.dataset.name.clone(),
        }
    }

    pub fn evaluate(&self, pipeline: &PipelineConfig, seed: u64) -> Result<EvalReport> {
        let method = PipelineMethod {
            text: &self.text,
            weights: &self.weights,
            config: pipeline.clone(),
        };
        evaluate(
            &method,
            &self.dataset,
            &self.config.episode,
            &EvalOptions {
                episodes: self.config.episodes,
                seed,
                workers: self.config.effective_workers(),
                config_fingerprint: self.fingerprint.clone(),
            },
        )
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub config_fingerprint: String,
}

/// Evaluates the configured variant; writes `report.json`, `episodes.csv`
/// and the resolved `config.json` under the output directory.
pub fn cmd_run(ws: &Workspace, seed: u64) -> Result<EvalReport> {
    let report = ws.evaluate(&ws.config.pipeline, seed)?;
    let out = &ws.config.out_dir;
    create_dir(out)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_file(&out.join("report.json"), json.as_bytes())?;
    let mut config = serde_json::to_string_pretty(&ws.config)?;
    config.push('\n');
    write_file(&out.join("config.json"), config.as_bytes())?;
    let mut w = csv_writer(&out.join("episodes.csv"))?;
    for (i, &accuracy) in report.accuracies.iter().enumerate() {
        w.serialize(EpisodeRow {
            episode: i,
            seed,
            accuracy,
            config_fingerprint: ws.fingerprint.clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io(out.join("episodes.csv"), e))?;
    Ok(report)
}

/// One evaluation of one variant under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    #[serde(rename = "N")]
    pub ways: usize,
    #[serde(rename = "K")]
    pub shots: usize,
    pub n_v: usize,
    pub dataset: String,
    pub mean: f64,
    pub ci95: f64,
    pub wall_time_s: f64,
    pub seed: u64,
    /// Episodes `0..episodes` of `seed`; equal across rows means paired.
    pub episodes: usize,
    pub config_fingerprint: String,
}

fn result_row(ws: &Workspace, pipeline: &PipelineConfig, seed: u64) -> Result<(ResultRow, EvalReport)> {
    let start = Instant::now();
    let report = ws.evaluate(pipeline, seed)?;
    let row = ResultRow {
        variant: pipeline.variant.name().to_string(),
        ways: ws.config.episode.ways,
        shots: ws.config.episode.shots,
        n_v: pipeline.n_v,
        dataset: ws.dataset_id(),
        mean: report.mean,
        ci95: report.ci95,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed,
        episodes: report.episodes,
        config_fingerprint: ws.fingerprint.clone(),
    };
    Ok((row, report))
}

/// All seven variants on identical episodes for every seed; writes
/// `ablation.csv`.
pub fn cmd_ablate(ws: &Workspace, variants: &[Variant]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &seed in &ws.config.seeds {
        for &variant in variants {
            let pipeline = PipelineConfig {
                variant,
                ..ws.config.pipeline.clone()
            };
            rows.push(result_row(ws, &pipeline, seed)?.0);
        }
    }
    create_dir(&ws.config.out_dir)?;
    write_rows(&ws.config.out_dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_v: usize,
    pub mean: f64,
    pub ci95: f64,
    pub seed: u64,
    pub episodes: usize,
    pub config_fingerprint: String,
}

/// One evaluation per `n_v` on the same episodes; writes `sweep_nv.csv`.
/// The feature budget follows `n_v` so each point validates.
pub fn cmd_sweep_nv(ws: &Workspace, nv_list: &[usize]) -> Result<Vec<SweepRow>> {
    if nv_list.is_empty() {
        return Err(Error::Config(vec!["n_v list must not be empty".into()]));
    }
    let shots = ws.config.episode.shots;
    let mut rows = Vec::new();
    for &seed in &ws.config.seeds {
        for &n_v in nv_list {
            let pipeline = PipelineConfig {
                n_v,
                feature_budget: ws.config.pipeline.feature_budget.map(|_| shots * (1 + n_v)),
                ..ws.config.pipeline.clone()
            };
            pipeline.validate(shots, ws.text.descriptions_per_class())?;
            let report = ws.evaluate(&pipeline, seed)?;
            rows.push(SweepRow {
                n_v,
                mean: report.mean,
                ci95: report.ci95,
                seed,
                episodes: report.episodes,
                config_fingerprint: ws.fingerprint.clone(),
            });
        }
    }
    create_dir(&ws.config.out_dir)?;
    write_rows(&ws.config.out_dir.join("sweep_nv.csv"), &rows)?;
    Ok(rows)
}

/// Whether the sweep means never drop by more than `tolerance` as n_v grows.
pub fn monotone_or_plateau(rows: &[SweepRow], tolerance: f64) -> bool {
    rows.windows(2).all(|w| w[0].seed != w[1].seed || w[1].mean + tolerance >= w[0].mean)
}

/// Row counts per role of a feature export.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureDump {
    pub path: PathBuf,
    pub support: usize,
    pub generated: usize,
    pub query: usize,
}

/// Trains episode `index` of `seed` and writes `features.csv` with
/// columns `role, class, label, f0..`. Support and generated rows are the
/// classifier's training features; query rows use the trained deep prompts.
pub fn cmd_export_features(ws: &Workspace, seed: u64, index: usize) -> Result<FeatureDump> {
    let episode = episode_for(&ws.dataset, &ws.config.episode, seed, index)?;
    let rng = crate::episodes::episode_rng(seed, index).substream("method");
    let trained = train_episode(&episode, &ws.text, &ws.weights, &ws.config.pipeline, &rng)?;
    let query = encode_images(&episode.query, None, trained.state.deep.as_ref(), &ws.weights)?;
    let d = query.cols();
    create_dir(&ws.config.out_dir)?;
    let path = ws.config.out_dir.join("features.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["role".to_string(), "class".into(), "label".into(), "config_fingerprint".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    let mut dump = FeatureDump {
        path: path.clone(),
        ..Default::default()
    };
    let mut emit = |role: &str, label: usize, row: &[f64]| -> Result<()> {
        let mut rec = vec![
            role.to_string(),
            episode.classes[label].to_string(),
            label.to_string(),
            ws.fingerprint.clone(),
        ];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
        Ok(())
    };
    let feats = &trained.features;
    for (i, role) in feats.roles.iter().enumerate() {
        let name = match role {
            FeatureRole::Original => {
                dump.support += 1;
                "support"
            }
            FeatureRole::Generated => {
                dump.generated += 1;
                "generated"
            }
        };
        emit(name, feats.labels[i], feats.features.row_slice(i))?;
    }
    for (i, &label) in episode.query_labels.iter().enumerate() {
        dump.query += 1;
        emit("query", label, query.row_slice(i))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(dump)
}

pub fn parse_loss(name: &str) -> Result<LossKind> {
    let n = name.to_ascii_lowercase();
    LossKind::ALL
        .into_iter()
        .find(|k| {
            let canonical = k.name().to_ascii_lowercase();
            n == canonical || n == canonical.trim_start_matches("l_")
        })
        .or(match n.as_str() {
            "arcface" => Some(LossKind::ArcFace),
            _ => None,
        })
        .ok_or_else(|| Error::Config(vec![format!("unknown loss {name:?}; expected L_div, L_se, L_TSC or L_cls")]))
}

/// Finite-difference checks for all four losses.
pub fn cmd_grad_check(options: &GradCheckOptions) -> Result<Vec<GradCheckResult>> {
    grad_check_suite(options)
}

pub fn format_grad_check(results: &[GradCheckResult], tolerance: f64) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<6} {} configs  max rel err {:.3e}  (tol {:.0e})  {}\n",
            r.loss.name(),
            r.configurations,
            r.max_relative_error,
            tolerance,
            if r.passed { "ok" } else { "FAILED" }
        ));
    }
    s
}

/// Human summary of a run directory or of a single `report.json`,
/// `ablation.csv` or `sweep_nv.csv`.
pub fn cmd_report(path: &Path) -> Result<String> {
    let files: Vec<PathBuf> = if path.is_dir() {
        ["report.json", "ablation.csv", "sweep_nv.csv"]
            .iter()
            .map(|f| path.join(f))
            .filter(|p| p.exists())
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Config(vec![format!("{}: no report.json, ablation.csv or sweep_nv.csv", path.display())]));
    }
    let mut out = String::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.ends_with(".json") {
            let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let r: EvalReport = serde_json::from_str(&text)?;
            out.push_str(&format!(
                "{}: {} on {}-way {}-shot, seed {}, {} episodes: {:.2} ± {:.2}%\n",
                f.display(),
                r.method,
                r.ways,
                r.shots,
                r.seed,
                r.episodes,
                100.0 * r.mean,
                100.0 * r.ci95
            ));
        } else if name.starts_with("sweep") {
            out.push_str(&format!("{}\n{:>4} {:>6} {:>16}\n", f.display(), "seed", "n_v", "accuracy"));
            let rows: Vec<SweepRow> = read_rows(&f)?;
            for r in &rows {
                out.push_str(&format!("{:>4} {:>6} {:>8.2} ± {:.2}\n", r.seed, r.n_v, 100.0 * r.mean, 100.0 * r.ci95));
            }
            let trend = if monotone_or_plateau(&rows, 0.01) { "monotone or plateau" } else { "not monotone" };
            out.push_str(&format!("trend: {trend}\n"));
        } else {
            out.push_str(&format!("{}\n{:>4} {:<10} {:>16} {:>9}\n", f.display(), "seed", "variant", "accuracy", "time (s)"));
            let rows: Vec<ResultRow> = read_rows(&f)?;
            for r in &rows {
                out.push_str(&format!(
                    "{:>4} {:<10} {:>8.2} ± {:.2} {:>9.1}\n",
                    r.seed,
                    r.variant,
                    100.0 * r.mean,
                    100.0 * r.ci95,
                    r.wall_time_s
                ));
            }
        }
    }
    Ok(out)
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Parser, Debug)]
#[command(name = "promptforge", version, about = "Semantic-guided diversity prompt tuning at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON config merged over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// desk (default), paper-1shot or paper-5shot.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Single seed, replacing the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Dotted override, e.g. `--set pipeline.iterations=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::resolve(self.preset.as_deref(), self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(e) = self.episodes {
            c.episodes = e;
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Evaluate one variant; writes report.json and episodes.csv.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// All variants on paired episodes; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated subset; defaults to all seven.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Accuracy against the number of generated features per support image.
    SweepNv {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        nv: Vec<usize>,
    },
    /// Support, generated and query features of one trained episode.
    ExportFeatures {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Finite-difference gradient checks for every loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        configurations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: negate one loss's analytic gradient.
        #[arg(long, hide = true)]
        flip_sign: Option<String>,
    },
    /// Summarise a run directory or result file.
    Report { path: PathBuf },
}

/// Runs one parsed command, writing human output to `out`.
pub fn execute(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let say = |out: &mut dyn std::io::Write, s: &str| {
        // a closed stdout is not worth failing a finished run over
        let _ = out.write_all(s.as_bytes());
    };
    match cli.command {
        Command::Run { common, variant } => {
            let mut config = common.resolve()?;
            if let Some(v) = variant {
                config.pipeline.variant = v;
            }
            let seed = config.seeds.first().copied().unwrap_or_default();
            let ws = Workspace::prepare(config)?;
            let r = cmd_run(&ws, seed)?;
            say(
                out,
                &format!(
                    "{} seed {}: {:.2} ± {:.2}% over {} episodes -> {}\n",
                    r.method,
                    seed,
                    100.0 * r.mean,
                    100.0 * r.ci95,
                    r.episodes,
                    ws.config.out_dir.display()
                ),
            );
        }
        Command::Ablate { common, variants } => {
            let ws = Workspace::prepare(common.resolve()?)?;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            cmd_ablate(&ws, &variants)?;
            say(out, &cmd_report(&ws.config.out_dir.join("ablation.csv"))?);
        }
        Command::SweepNv { common, nv } => {
            let ws = Workspace::prepare(common.resolve()?)?;
            cmd_sweep_nv(&ws, &nv)?;
            say(out, &cmd_report(&ws.config.out_dir.join("sweep_nv.csv"))?);
        }
        Command::ExportFeatures {
            common,
            episode,
            variant,
        } => {
            let mut config = common.resolve()?;
            if let Some(v) = variant {
                config.pipeline.variant = v;
            }
            let seed = config.seeds.first().copied().unwrap_or_default();
            let ws = Workspace::prepare(config)?;
            let d = cmd_export_features(&ws, seed, episode)?;
            say(
                out,
                &format!(
                    "{}: {} support, {} generated, {} query rows\n",
                    d.path.display(),
                    d.support,
                    d.generated,
                    d.query
                ),
            );
        }
        Command::GradCheck {
            configurations,
            seed,
            flip_sign,
        } => {
            let options = GradCheckOptions {
                configurations,
                seed,
                flip_sign: flip_sign.as_deref().map(parse_loss).transpose()?,
                ..GradCheckOptions::default()
            };
            let results = cmd_grad_check(&options)?;
            say(out, &format_grad_check(&results, options.tolerance));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.loss.name()).collect();
            if !failed.is_empty() {
                return Err(Error::Other(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Report { path } => say(out, &cmd_report(&path)?),
    }
    let _ = out.flush();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap_or_else(|e| panic!("{p}: {e}"));
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, back);
        let empty: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, c);
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::resolve(
            None,
            None,
            &["pipeline.iterations=3".into(), "pipeline.variant=b2".into(), "episode.ways=4".into()],
        )
        .unwrap();
        assert_eq!(c.pipeline.iterations, 3);
        assert_eq!(c.pipeline.variant, Variant::B2);
        assert_eq!(c.episode.ways, 4);
        let e = RunConfig::resolve(None, None, &["pipeline.iterationz=3".into(), "nokey".into()]).unwrap_err();
        match e {
            Error::Config(list) => assert_eq!(list.len(), 2, "{list:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = RunConfig::default();
        c.corpus = Some(PathBuf::from("/definitely/missing/corpus.json"));
        c.episodes = 0;
        c.seeds.clear();
        c.pipeline.lr_prompts = 0.0;
        let Error::Config(list) = c.validate().unwrap_err() else { panic!() };
        assert!(list.iter().any(|m| m.contains("/definitely/missing/corpus.json")), "{list:?}");
        assert!(list.iter().any(|m| m.contains("episodes")));
        assert!(list.iter().any(|m| m.contains("seeds")));
        assert!(list.iter().any(|m| m.contains("lr_prompts")));
    }

    #[test]
    fn fingerprint_ignores_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        b.workers = 3;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.pipeline.iterations += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn loss_names_parse() {
        assert_eq!(parse_loss("L_div").unwrap(), LossKind::Diversity);
        assert_eq!(parse_loss("tsc").unwrap(), LossKind::TargetedContrastive);
        assert_eq!(parse_loss("arcface").unwrap(), LossKind::ArcFace);
        assert!(parse_loss("l2").is_err());
    }

    #[test]
    fn plateau_check() {
        let row = |n_v, mean| SweepRow {
            n_v,
            mean,
            ci95: 0.0,
            seed: 0,
            episodes: 1,
            config_fingerprint: String::new(),
        };
        assert!(monotone_or_plateau(&[row(1, 0.5), row(2, 0.6), row(3, 0.595)], 0.01));
        assert!(!monotone_or_plateau(&[row(1, 0.5), row(2, 0.4)], 0.01));
    }
}
