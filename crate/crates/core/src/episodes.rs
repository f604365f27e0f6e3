//! Synthetic domain-shifted datasets, N-way K-shot episodes and the
//! evaluation protocol.
//!
//! Each synthetic class is a striped texture with its own two-colour palette
//! and stripe frequency. Orientation, phase and brightness vary per image. A
//! domain transform then permutes channels, applies a gamma curve and adds
//! noise. Class descriptions are generated from the same attributes.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{Image, CHANNELS};
use crate::numerics::SeededRng;
use crate::semantic::{ClassDescriptions, DescriptionCorpus};
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const PALETTE: [(&str, [f32; 3]); 12] = [
    ("red", [0.85, 0.15, 0.12]),
    ("orange", [0.95, 0.55, 0.10]),
    ("yellow", [0.95, 0.90, 0.20]),
    ("green", [0.20, 0.70, 0.25]),
    ("teal", [0.10, 0.60, 0.60]),
    ("blue", [0.15, 0.30, 0.85]),
    ("purple", [0.55, 0.20, 0.70]),
    ("pink", [0.95, 0.55, 0.75]),
    ("brown", [0.50, 0.30, 0.15]),
    ("gray", [0.50, 0.50, 0.50]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
];

const FREQUENCIES: [(&str, f32); 4] = [("broad", 1.0), ("wide", 1.5), ("narrow", 2.5), ("fine", 3.5)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainTransform {
    pub channel_permutation: [usize; 3],
    pub gamma: f32,
    pub noise_std: f32,
}

impl Default for DomainTransform {
    fn default() -> Self {
        DomainTransform {
            channel_permutation: [2, 0, 1],
            gamma: 1.6,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Per-pixel texture noise before the domain transform.
    pub texture_noise: f32,
    /// Uniform brightness jitter half-width per image.
    pub brightness_jitter: f32,
    pub descriptions_per_class: usize,
    pub transform: DomainTransform,
    pub seed: u64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        SyntheticDomainSpec {
            name: "synthetic-stripes".into(),
            classes: 10,
            images_per_class: 30,
            image_size: 32,
            texture_noise: 0.3,
            brightness_jitter: 0.1,
            descriptions_per_class: 6,
            transform: DomainTransform::default(),
            seed: 0,
        }
    }
}

/// Attributes one class is generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAttributes {
    pub primary: usize,
    pub secondary: usize,
    pub frequency: usize,
}

impl ClassAttributes {
    pub fn name(&self) -> String {
        format!(
            "{} stripes in {} and {}",
            FREQUENCIES[self.frequency].0, PALETTE[self.secondary].0, PALETTE[self.primary].0
        )
    }

    /// Every name and description ends on the primary colour, which differs
    /// between classes; a last-token text readout then separates them.
    fn descriptions(&self, n: usize) -> Vec<String> {
        let (p, s, f) = (PALETTE[self.primary].0, PALETTE[self.secondary].0, FREQUENCIES[self.frequency].0);
        const NOUNS: [&str; 8] = ["stripes", "bands", "lines", "strips", "pattern", "texture", "weave", "ripples"];
        (0..n).map(|i| format!("{f} {} of {s} and {p}", NOUNS[i % NOUNS.len()])).collect()
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let combos = PALETTE.len() * (PALETTE.len() - 1) * FREQUENCIES.len();
        if self.classes < 2 || self.classes > combos {
            errs.push(format!("dataset.classes must be in [2, {combos}], got {}", self.classes));
        }
        if self.images_per_class == 0 {
            errs.push("dataset.images_per_class must be >= 1".to_string());
        }
        if self.image_size < 4 {
            errs.push("dataset.image_size must be >= 4".to_string());
        }
        if self.descriptions_per_class == 0 {
            errs.push("dataset.descriptions_per_class must be >= 1".to_string());
        }
        let mut perm = self.transform.channel_permutation;
        perm.sort();
        if perm != [0, 1, 2] {
            errs.push(format!(
                "dataset.transform.channel_permutation {:?} is not a permutation of 0..3",
                self.transform.channel_permutation
            ));
        }
        if !(self.transform.gamma > 0.0) || self.transform.noise_std < 0.0 || self.texture_noise < 0.0 {
            errs.push("dataset.transform.gamma must be > 0 and noise levels >= 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Distinct attribute triples, one per class, drawn from `seed`.
    pub fn class_attributes(&self) -> Vec<ClassAttributes> {
        let mut rng = SeededRng::new(self.seed).substream("class-attributes");
        let mut combos = Vec::new();
        for primary in 0..PALETTE.len() {
            for secondary in 0..PALETTE.len() {
                if secondary != primary {
                    for frequency in 0..FREQUENCIES.len() {
                        combos.push(ClassAttributes {
                            primary,
                            secondary,
                            frequency,
                        });
                    }
                }
            }
        }
        // prefer classes that do not share a primary colour
        rng.shuffle(&mut combos);
        let mut picked: Vec<ClassAttributes> = Vec::with_capacity(self.classes);
        for c in &combos {
            if picked.len() < self.classes && picked.iter().all(|p| p.primary != c.primary) {
                picked.push(c.clone());
            }
        }
        for c in combos {
            if picked.len() == self.classes {
                break;
            }
            if !picked.contains(&c) {
                picked.push(c);
            }
        }
        picked
    }
}

fn render_texture(attr: &ClassAttributes, spec: &SyntheticDomainSpec, rng: &mut SeededRng) -> Image {
    let n = spec.image_size;
    let (p, s) = (PALETTE[attr.primary].1, PALETTE[attr.secondary].1);
    let freq = FREQUENCIES[attr.frequency].1;
    let angle = rng.uniform() * std::f64::consts::PI;
    let phase = rng.uniform() * std::f64::consts::TAU;
    let brightness = (rng.uniform() * 2.0 - 1.0) as f32 * spec.brightness_jitter;
    let (ca, sa) = (angle.cos(), angle.sin());
    let t = &spec.transform;
    let mut img = Image::zeros(n, n, CHANNELS);
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 * ca + y as f64 * sa) / n as f64;
            let w = (0.5 + 0.5 * (std::f64::consts::TAU * freq as f64 * u + phase).sin()) as f32;
            let mut raw = [0f32; 3];
            for c in 0..3 {
                let v = w * p[c] + (1.0 - w) * s[c] + brightness + spec.texture_noise * rng.normal() as f32;
                raw[c] = v.clamp(0.0, 1.0);
            }
            for c in 0..3 {
                let v = raw[t.channel_permutation[c]].powf(t.gamma) + t.noise_std * rng.normal() as f32;
                img.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Images with labels, class names and the matching description corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub corpus: DescriptionCorpus,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.corpus.classes.len()
    }

    pub fn image_size(&self) -> usize {
        self.images.first().map_or(0, |im| im.height)
    }

    pub fn class_members(&self, class: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

pub fn generate_synthetic_domain(spec: &SyntheticDomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let attrs = spec.class_attributes();
    let root = SeededRng::new(spec.seed);
    let mut images = Vec::with_capacity(spec.classes * spec.images_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (y, attr) in attrs.iter().enumerate() {
        for i in 0..spec.images_per_class {
            let mut rng = root.substream(&format!("image/{y}/{i}"));
            images.push(render_texture(attr, spec, &mut rng));
            labels.push(y);
        }
    }
    let corpus = DescriptionCorpus {
        domain: "Synthetic texture".into(),
        template: "[Domain] photo of [Class] [Description]".into(),
        classes: attrs
            .iter()
            .map(|a| ClassDescriptions {
                name: a.name(),
                descriptions: a.descriptions(spec.descriptions_per_class),
            })
            .collect(),
    };
    Ok(Dataset {
        name: spec.name.clone(),
        images,
        labels,
        corpus,
    })
}

/// One N-way K-shot task. Labels are episode-local (`0..N`); `classes`
/// maps them back to dataset classes and the `*_ids` fields to dataset
/// image indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Image>,
    pub support_labels: Vec<usize>,
    pub support_ids: Vec<usize>,
    pub query: Vec<Image>,
    pub query_labels: Vec<usize>,
    pub query_ids: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    pub fn shots(&self) -> usize {
        self.support.len() / self.classes.len().max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            ways: 5,
            shots: 1,
            queries: 15,
        }
    }
}

pub fn sample_episode(dataset: &Dataset, config: &EpisodeConfig, rng: &mut SeededRng) -> Result<Episode> {
    let (n, k, m) = (config.ways, config.shots, config.queries);
    if n == 0 || k == 0 {
        return Err(Error::invalid("episodes need N >= 1 and K >= 1"));
    }
    if dataset.num_classes() < n {
        return Err(Error::invalid(format!("dataset has {} classes, episode needs N = {}", dataset.num_classes(), n)));
    }
    let classes = rng.sample_indices(dataset.num_classes(), n);
    let mut ep = Episode {
        classes: classes.clone(),
        support: Vec::with_capacity(n * k),
        support_labels: Vec::with_capacity(n * k),
        support_ids: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * m),
        query_labels: Vec::with_capacity(n * m),
        query_ids: Vec::with_capacity(n * m),
    };
    for (y, &c) in classes.iter().enumerate() {
        let members = dataset.class_members(c);
        if members.len() < k + m {
            return Err(Error::invalid(format!(
                "class {} has {} images, episode needs K + M = {}",
                c,
                members.len(),
                k + m
            )));
        }
        let picks = rng.sample_indices(members.len(), k + m);
        for (j, &p) in picks.iter().enumerate() {
            let id = members[p];
            if j < k {
                ep.support.push(dataset.images[id].clone());
                ep.support_labels.push(y);
                ep.support_ids.push(id);
            } else {
                ep.query.push(dataset.images[id].clone());
                ep.query_labels.push(y);
                ep.query_ids.push(id);
            }
        }
    }
    Ok(ep)
}

/// Something that can be scored on an episode.
pub trait EpisodeMethod: Sync {
    fn name(&self) -> String;

    /// Predicted episode-local labels for the query set.
    fn predict(&self, episode: &Episode, rng: &SeededRng) -> Result<Vec<usize>>;
}

/// Uniform guesses.
pub struct RandomPredictor;

impl EpisodeMethod for RandomPredictor {
    fn name(&self) -> String {
        "random".into()
    }

    fn predict(&self, episode: &Episode, rng: &SeededRng) -> Result<Vec<usize>> {
        let mut r = rng.substream("random-predictor");
        Ok(episode.query.iter().map(|_| r.below(episode.ways())).collect())
    }
}

/// Reads the answers; used to test the harness.
pub struct OraclePredictor;

impl EpisodeMethod for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, episode: &Episode, _rng: &SeededRng) -> Result<Vec<usize>> {
        Ok(episode.query_labels.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

/// Mean and 95% half-width `1.96·s/√n` with the sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Root stream of episode `index` under `seed`. Episode sampling and the
/// method draw from separate children, so every method sees the same
/// episodes.
pub fn episode_rng(seed: u64, index: usize) -> SeededRng {
    SeededRng::new(seed).substream_indexed("episode", index)
}

pub fn episode_for(dataset: &Dataset, config: &EpisodeConfig, seed: u64, index: usize) -> Result<Episode> {
    sample_episode(dataset, config, &mut episode_rng(seed, index).substream("sample"))
}

pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub config_fingerprint: String,
}

pub fn evaluate(method: &dyn EpisodeMethod, dataset: &Dataset, config: &EpisodeConfig, options: &EvalOptions) -> Result<EvalReport> {
    if options.episodes == 0 {
        return Err(Error::invalid("episode count must be >= 1"));
    }
    let run = |i: usize| -> Result<f64> {
        let episode = episode_for(dataset, config, options.seed, i)?;
        let preds = method.predict(&episode, &episode_rng(options.seed, i).substream("method"))?;
        if preds.len() != episode.query_labels.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} queries",
                preds.len(),
                episode.query_labels.len()
            )));
        }
        let correct = preds.iter().zip(&episode.query_labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / preds.len() as f64)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::Other(format!("worker pool: {e}")))?;
    let results: Vec<Result<f64>> = pool.install(|| (0..options.episodes).into_par_iter().map(run).collect());
    let mut accuracies = Vec::with_capacity(options.episodes);
    for (index, r) in results.into_iter().enumerate() {
        accuracies.push(r.map_err(|e| Error::Episode {
            index,
            source: Box::new(e),
        })?);
    }
    let (mean, ci95) = mean_ci95(&accuracies);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: method.name(),
        config_fingerprint: options.config_fingerprint.clone(),
        seed: options.seed,
        episodes: options.episodes,
        ways: config.ways,
        shots: config.shots,
        queries: config.queries,
        mean,
        ci95,
        accuracies,
    })
}

const IMAGE_MAGIC: &[u8; 4] = b"PFI1";

/// `PFI1`, then height, width, channels as little-endian u32, then the
/// row-major f32 samples.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + image.data.len() * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    for v in [image.height, image.width, image.channels] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..4] != IMAGE_MAGIC {
        return Err(Error::Format(format!("{}: not a PFI1 image", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let payload = &buf[16..];
    if payload.len() != h * w * c * 4 {
        return Err(Error::Format(format!(
            "{}: {}x{}x{} image needs {} payload bytes, found {}",
            path.display(),
            h,
            w,
            c,
            h * w * c * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Image::new(h, w, c, data)
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    file: String,
    label: usize,
    class: String,
}

/// Writes `images/NNNNN.pfi`, `labels.csv` and `corpus.json` under `dir`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path)?;
    for (i, (im, &y)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let file = format!("images/{i:05}.pfi");
        write_image(&dir.join(&file), im)?;
        w.serialize(LabelRow {
            file,
            label: y,
            class: dataset.corpus.classes[y].name.clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    dataset.corpus.save(dir.join("corpus.json"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let corpus = DescriptionCorpus::load(dir.join("corpus.json"))?;
    let labels_path = dir.join("labels.csv");
    let mut r = csv::Reader::from_path(&labels_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&labels_path, io),
        other => Error::Format(format!("{}: {:?}", labels_path.display(), other)),
    })?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for row in r.deserialize() {
        let row: LabelRow = row?;
        if row.label >= corpus.classes.len() {
            return Err(Error::Format(format!(
                "{}: label {} but the corpus has {} classes",
                labels_path.display(),
                row.label,
                corpus.classes.len()
            )));
        }
        images.push(read_image(&dir.join(&row.file))?);
        labels.push(row.label);
    }
    Ok(Dataset {
        name: dir.file_name().map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned()),
        images,
        labels,
        corpus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            classes: 8,
            images_per_class: 20,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_domain(&small_spec()).unwrap();
        let b = generate_synthetic_domain(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.len(), 160);
        let c = generate_synthetic_domain(&SyntheticDomainSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn corpus_has_equal_counts_and_names_attributes() {
        let d = generate_synthetic_domain(&small_spec()).unwrap();
        d.corpus.validate().unwrap();
        assert!(d.corpus.classes.iter().all(|c| c.descriptions.len() == 6));
        let attrs = small_spec().class_attributes();
        let colour = PALETTE[attrs[0].primary].0;
        assert!(d.corpus.classes[0].descriptions.iter().any(|s| s.contains(colour)));
    }

    fn mean_distance(a: &[&Image], b: &[&Image], same: bool) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                if same && i == j {
                    continue;
                }
                // per-channel mean colour distance, orientation invariant
                let mx: Vec<f64> = (0..3).map(|c| x.data.iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>()).collect();
                let my: Vec<f64> = (0..3).map(|c| y.data.iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>()).collect();
                total += mx.iter().zip(&my).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn disjoint_palettes_separate() {
        let d = generate_synthetic_domain(&small_spec()).unwrap();
        let attrs = small_spec().class_attributes();
        let (i, j) = (0..8)
            .flat_map(|i| (0..8).map(move |j| (i, j)))
            .find(|&(i, j)| {
                i != j
                    && ![attrs[j].primary, attrs[j].secondary].contains(&attrs[i].primary)
                    && ![attrs[j].primary, attrs[j].secondary].contains(&attrs[i].secondary)
            })
            .unwrap();
        let a: Vec<&Image> = d.class_members(i).into_iter().map(|k| &d.images[k]).collect();
        let b: Vec<&Image> = d.class_members(j).into_iter().map(|k| &d.images[k]).collect();
        assert!(mean_distance(&a, &b, false) > mean_distance(&a, &a, true));
    }

    #[test]
    fn episode_counts_and_disjointness() {
        let d = generate_synthetic_domain(&small_spec()).unwrap();
        let mut rng = SeededRng::new(4);
        let ep = sample_episode(&d, &EpisodeConfig::default(), &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        assert!(ep.support_ids.iter().all(|id| !ep.query_ids.contains(id)));
        let mut cls = ep.classes.clone();
        cls.sort();
        cls.dedup();
        assert_eq!(cls.len(), 5);
        for (y, id) in ep.query_labels.iter().zip(&ep.query_ids) {
            assert_eq!(d.labels[*id], ep.classes[*y]);
        }
        let again = sample_episode(&d, &EpisodeConfig::default(), &mut SeededRng::new(4)).unwrap();
        assert_eq!(ep, again);
    }

    #[test]
    fn insufficient_data_is_an_error() {
        let d = generate_synthetic_domain(&small_spec()).unwrap();
        let mut rng = SeededRng::new(4);
        let too_many_ways = EpisodeConfig { ways: 9, ..Default::default() };
        assert!(sample_episode(&d, &too_many_ways, &mut rng).is_err());
        let too_many_queries = EpisodeConfig { queries: 20, ..Default::default() };
        assert!(sample_episode(&d, &too_many_queries, &mut rng).is_err());
    }

    #[test]
    fn ci_of_known_values() {
        let (m, ci) = mean_ci95(&[0.2, 0.4, 0.6]);
        assert!((m - 0.4).abs() < 1e-15);
        assert!((ci - 1.96 * 0.2 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_ci95(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn oracle_scores_one() {
        let d = generate_synthetic_domain(&small_spec()).unwrap();
        let opts = EvalOptions {
            episodes: 20,
            seed: 1,
            workers: 2,
            config_fingerprint: String::new(),
        };
        let r = evaluate(&OraclePredictor, &d, &EpisodeConfig::default(), &opts).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.ci95, 0.0);
    }

    #[test]
    fn report_mean_is_arithmetic_mean_and_reproducible() {
        let d = generate_synthetic_domain(&small_spec()).unwrap();
        let opts = |workers| EvalOptions {
            episodes: 40,
            seed: 9,
            workers,
            config_fingerprint: "x".into(),
        };
        let a = evaluate(&RandomPredictor, &d, &EpisodeConfig::default(), &opts(1)).unwrap();
        let b = evaluate(&RandomPredictor, &d, &EpisodeConfig::default(), &opts(3)).unwrap();
        assert_eq!(a, b);
        let m = a.accuracies.iter().sum::<f64>() / 40.0;
        assert!((a.mean - m).abs() < 1e-12);
    }

    struct Failing;

    impl EpisodeMethod for Failing {
        fn name(&self) -> String {
            "failing".into()
        }

        fn predict(&self, _: &Episode, _: &SeededRng) -> Result<Vec<usize>> {
            Err(Error::NonFinite("boom".into()))
        }
    }

    #[test]
    fn errors_carry_episode_index() {
        let d = generate_synthetic_domain(&small_spec()).unwrap();
        let opts = EvalOptions {
            episodes: 3,
            seed: 0,
            workers: 1,
            config_fingerprint: String::new(),
        };
        match evaluate(&Failing, &d, &EpisodeConfig::default(), &opts) {
            Err(Error::Episode { index: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_round_trip() {
        let spec = SyntheticDomainSpec {
            classes: 3,
            images_per_class: 2,
            image_size: 8,
            ..Default::default()
        };
        let d = generate_synthetic_domain(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.images, d.images);
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.corpus, d.corpus);
    }

    #[test]
    fn truncated_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pfi");
        write_image(&p, &Image::zeros(4, 4, 3)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Format(_))));
    }
}
