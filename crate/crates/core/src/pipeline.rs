//! Two-step training for one episode.
//!
//! Step 1 tunes diversity prompts, deep prompts and the semantic adapter.
//! It runs two backward passes per iteration: `L_TSC + L_div` updates the
//! prompts and `L_se` updates the adapter. Step 2 encodes the support set
//! and its augmentations with the trained prompts, then fits a classifier.
//! The classifier is an adapter followed by an ArcFace head.
//!
//! The ablation variants reuse the same machinery with parts switched off.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{tokenize_image, BoundWeights, EncoderWeights, Image, VisualBatch};
use crate::episodes::{Episode, EpisodeMethod};
use crate::losses::{
    arcface_loss, cosine_softmax_loss, diversity_loss, flatten_prompts, semantic_contrastive_loss, tsc_loss,
    ArcFaceConfig, LossKind, LossValue,
};
use crate::numerics::{cosine, Adam, AdamConfig, Gradients, Graph, NodeId, SeededRng, Tensor};
use crate::prompts::{init_prompt_banks, DeepPromptStack, DiversityPromptBank, PromptShape};
use crate::semantic::{
    build_class_prompt_features, build_describe_features, combine_describe_features, select_semantic_targets,
    Adapter, AdapterNodes, DescribeFeatureSet, DescriptionCorpus, LabeledFeatures, RankDraw, SelectionConfig,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    ClipBase,
    B1,
    B2,
    B3,
    B4,
    OneStep,
}

impl Variant {
    /// Ablation order used by the ablate command.
    pub const ALL: [Variant; 7] = [
        Variant::ClipBase,
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::B4,
        Variant::OneStep,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ClipBase => "clip_base",
            Variant::B1 => "b1",
            Variant::B2 => "b2",
            Variant::B3 => "b3",
            Variant::B4 => "b4",
            Variant::OneStep => "one_step",
        }
    }

    pub fn features(self) -> VariantFeatures {
        use Variant::*;
        VariantFeatures {
            deep_prompts: self != ClipBase,
            diversity_prompts: matches!(self, B2 | B3 | B4 | OneStep | Full),
            diversity_loss: matches!(self, B2 | OneStep | Full),
            semantic_guidance: matches!(self, B3 | B4 | OneStep | Full),
            rank_draw: if self == B3 { RankDraw::Top } else { RankDraw::Gamma },
            one_step: self == OneStep,
            margin_classifier: self != ClipBase,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown variant {s:?}; expected one of full, clip_base, b1, b2, b3, b4, one_step")]))
    }
}

/// Which pipeline parts a variant switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFeatures {
    pub deep_prompts: bool,
    pub diversity_prompts: bool,
    pub diversity_loss: bool,
    /// Describe prompts, adapter, `L_se` and per-feature target selection.
    /// Without it the TSC targets are the class prompts.
    pub semantic_guidance: bool,
    pub rank_draw: RankDraw,
    pub one_step: bool,
    /// Adapter + ArcFace head; otherwise a cosine-softmax probe.
    pub margin_classifier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Augmented views (and diversity prompts) per support image.
    pub n_v: usize,
    pub prompt_length: usize,
    pub deep_tokens: usize,
    /// Step-1 iterations T.
    pub iterations: usize,
    pub lr_prompts: f64,
    pub lr_adapter: f64,
    pub classifier_epochs: usize,
    pub lr_classifier: f64,
    /// Random-combination multiplier t_s.
    pub t_s: usize,
    pub selection: SelectionConfig,
    pub tau: f64,
    pub arcface: ArcFaceConfig,
    pub adapter_alpha: f64,
    pub signed_sim: bool,
    /// Also feed the un-prompted support originals through step 1.
    pub originals_in_step1: bool,
    /// Required K·(1 + n_v) when set.
    pub feature_budget: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::Full,
            n_v: 24,
            prompt_length: 1,
            deep_tokens: 5,
            iterations: 60,
            lr_prompts: 1e-3,
            lr_adapter: 1e-3,
            classifier_epochs: 100,
            lr_classifier: 1e-3,
            t_s: 50,
            selection: SelectionConfig::default(),
            tau: 0.07,
            arcface: ArcFaceConfig::default(),
            adapter_alpha: 0.2,
            signed_sim: false,
            originals_in_step1: false,
            feature_budget: Some(25),
        }
    }
}

impl PipelineConfig {
    /// Checks that need the episode shape and the corpus size.
    pub fn validate(&self, shots: usize, descriptions_per_class: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_v == 0 {
            errs.push("pipeline.n_v must be >= 1".to_string());
        }
        if self.prompt_length == 0 {
            errs.push("pipeline.prompt_length must be >= 1".to_string());
        }
        if let Some(budget) = self.feature_budget {
            if shots * (1 + self.n_v) != budget {
                errs.push(format!(
                    "K·(1 + n_v) = {}·(1 + {}) = {} does not match pipeline.feature_budget = {}",
                    shots,
                    self.n_v,
                    shots * (1 + self.n_v),
                    budget
                ));
            }
        }
        for (name, lr) in [
            ("lr_prompts", self.lr_prompts),
            ("lr_adapter", self.lr_adapter),
            ("lr_classifier", self.lr_classifier),
        ] {
            if !(lr > 0.0) {
                errs.push(format!("pipeline.{name} must be > 0"));
            }
        }
        if !(self.tau > 0.0) {
            errs.push("pipeline.tau must be > 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.adapter_alpha) {
            errs.push("pipeline.adapter_alpha must be in [0, 1]".to_string());
        }
        if let Err(e) = self.arcface.validate() {
            errs.push(format!("pipeline.arcface: {e}"));
        }
        if self.variant.features().semantic_guidance {
            if self.t_s == 0 {
                errs.push("pipeline.t_s must be >= 1".to_string());
            }
            if let Err(e) = self.selection.validate() {
                errs.push(format!("pipeline.selection: {e}"));
            }
            let pool = self.t_s * descriptions_per_class;
            if pool < self.selection.c {
                errs.push(format!(
                    "per-class semantic pool t_s·n_s = {}·{} = {} is smaller than selection.c = {}",
                    self.t_s, descriptions_per_class, pool, self.selection.c
                ));
            }
            if self.t_s > 1 && descriptions_per_class < 2 {
                errs.push("t_s > 1 needs at least two descriptions per class".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Text features for every class of a dataset, computed once and shared by
/// all episodes.
#[derive(Clone, Debug)]
pub struct TextFeatureCache {
    pub describe: DescribeFeatureSet,
    pub class_prompts: Tensor,
}

impl TextFeatureCache {
    pub fn build(corpus: &DescriptionCorpus, weights: &EncoderWeights) -> Result<Self> {
        Ok(TextFeatureCache {
            describe: build_describe_features(corpus, weights)?,
            class_prompts: build_class_prompt_features(corpus, weights)?,
        })
    }

    pub fn descriptions_per_class(&self) -> usize {
        self.describe.per_class
    }

    /// F_dt and F_cls of the episode classes, relabelled `0..N`.
    pub fn episode_view(&self, classes: &[usize]) -> Result<(DescribeFeatureSet, Tensor)> {
        let d = self.class_prompts.cols();
        let total = self.class_prompts.rows();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut cls = Vec::new();
        for (y, &c) in classes.iter().enumerate() {
            if c >= total {
                return Err(Error::OutOfRange { index: c, len: total });
            }
            cls.push(self.class_prompts.row_slice(c).to_vec());
            for r in self.describe.set.class_rows(c) {
                rows.extend_from_slice(self.describe.set.features.row_slice(r));
                labels.push(y);
            }
        }
        Ok((
            DescribeFeatureSet {
                set: LabeledFeatures {
                    features: Tensor::matrix(labels.len(), d, rows)?,
                    labels,
                },
                per_class: self.describe.per_class,
            },
            Tensor::from_rows(&cls)?,
        ))
    }
}

/// One augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        dx: 0,
        dy: 0,
        quarter_turns: 0,
    };

    pub fn sample(patch_size: usize, rotations: bool, rng: &mut SeededRng) -> Self {
        let r = (patch_size / 2) as i32;
        let offset = |rng: &mut SeededRng| rng.below(2 * r as usize + 1) as i32 - r;
        AugmentParams {
            flip: rng.bernoulli(0.5),
            dx: offset(rng),
            dy: offset(rng),
            quarter_turns: if rotations { rng.below(4) as u8 } else { 0 },
        }
    }
}

/// Flip, translate with edge padding, then rotate.
pub fn augment_image(image: &Image, p: AugmentParams) -> Image {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut out = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            let sy = (y as i64 - p.dy as i64).clamp(0, h as i64 - 1) as usize;
            let sx = (x as i64 - p.dx as i64).clamp(0, w as i64 - 1) as usize;
            let sx = if p.flip { w - 1 - sx } else { sx };
            for c in 0..ch {
                out.set(y, x, c, image.at(sy, sx, c));
            }
        }
    }
    for _ in 0..p.quarter_turns % 4 {
        out = rotate_quarter(&out);
    }
    out
}

fn rotate_quarter(image: &Image) -> Image {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut out = Image::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out.set(w - 1 - x, y, c, image.at(y, x, c));
            }
        }
    }
    out
}

/// `n_v` views per support image; view `j` of image `s` sits at `s·n_v + j`.
pub fn augment_support(
    support: &[Image],
    n_v: usize,
    patch_size: usize,
    rotations: bool,
    rng: &mut SeededRng,
) -> Result<Vec<Image>> {
    if n_v == 0 {
        return Err(Error::invalid("n_v must be >= 1"));
    }
    let mut out = Vec::with_capacity(support.len() * n_v);
    for img in support {
        for _ in 0..n_v {
            out.push(augment_image(img, AugmentParams::sample(patch_size, rotations, rng)));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub l_div: Option<f64>,
    pub l_se: Option<f64>,
    pub l_tsc: Option<f64>,
    pub l_cls: Option<f64>,
}

/// Largest absolute gradient each backward pass leaves on the parameters it
/// must not touch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoutingSnapshot {
    pub iteration: usize,
    pub adapter_grad_in_prompt_pass: f64,
    pub prompt_grad_in_semantic_pass: f64,
    /// Largest parameter change per group in this iteration.
    pub adapter_delta: f64,
    pub prompt_delta: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    pub phases: usize,
    /// Losses that enter the prompt-side objective, in order.
    pub loss_terms: Vec<LossKind>,
    pub rank_draw: Option<RankDraw>,
    pub iterations: Vec<IterationRecord>,
    pub routing: Vec<RoutingSnapshot>,
    pub classifier_losses: Vec<f64>,
    /// Dataset ids of every image that entered training.
    pub trained_on: BTreeSet<usize>,
}

/// Trainable state produced by step 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub bank: Option<DiversityPromptBank>,
    pub deep: Option<DeepPromptStack>,
    pub adapter: Option<Adapter>,
}

pub struct Step1Output {
    pub state: PromptState,
    /// Classifier trained jointly, one-step variant only.
    pub classifier: Option<Classifier>,
    pub diagnostics: Diagnostics,
}

/// Patch tokens are fixed for a given image, so they are computed once.
fn tokenize_all(images: &[Image], weights: &EncoderWeights) -> Result<Vec<Tensor>> {
    images.iter().map(|im| tokenize_image(im, weights)).collect()
}

fn max_abs(t: Option<&Tensor>) -> f64 {
    t.map_or(0.0, |t| t.data().iter().fold(0.0, |m, v| m.max(v.abs())))
}

fn max_delta(before: &Tensor, after: &Tensor) -> f64 {
    before.max_abs_diff(after)
}

fn grads_for<'a>(grads: &'a Gradients, nodes: &[NodeId], shapes: &[&Tensor]) -> Vec<Tensor> {
    nodes
        .iter()
        .zip(shapes)
        .map(|(n, t)| grads.get(*n).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect()
}

fn with_iteration(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step-1 iteration {iteration}: {msg}")),
        other => other,
    }
}

/// Step 1. `augmented` holds the `n_v` views of each support image in
/// [`augment_support`] order.
pub fn step1_train(
    episode: &Episode,
    augmented: &[Image],
    text: &TextFeatureCache,
    weights: &EncoderWeights,
    config: &PipelineConfig,
    rng: &SeededRng,
) -> Result<Step1Output> {
    let features = config.variant.features();
    let enc = weights.config();
    let ways = episode.ways();
    let shots = episode.shots();
    config.validate(shots, text.descriptions_per_class())?;
    if augmented.len() != ways * shots * config.n_v {
        return Err(Error::invalid(format!(
            "{} augmented images for N·K·n_v = {}",
            augmented.len(),
            ways * shots * config.n_v
        )));
    }
    let shape = PromptShape {
        ways,
        shots,
        n_v: config.n_v,
        length: config.prompt_length,
        deep_tokens: config.deep_tokens,
    };
    let (bank, deep) = init_prompt_banks(&shape, enc.embed_dim, enc.layers, &rng.substream("prompts"))?;
    let mut bank = features.diversity_prompts.then_some(bank);
    let mut deep = (features.deep_prompts && config.deep_tokens > 0).then_some(deep);
    let mut adapter = if features.semantic_guidance {
        Some(Adapter::new(enc.embed_dim, config.adapter_alpha, &mut rng.substream("semantic-adapter"))?)
    } else {
        None
    };
    let mut classifier = if features.one_step {
        Some(Classifier::new(ways, enc.embed_dim, true, config, &mut rng.substream("classifier-init"))?)
    } else {
        None
    };

    let mut diagnostics = Diagnostics {
        phases: if features.one_step { 1 } else { 2 },
        rank_draw: features.semantic_guidance.then_some(features.rank_draw),
        ..Default::default()
    };
    diagnostics.loss_terms.push(LossKind::TargetedContrastive);
    if features.diversity_loss {
        diagnostics.loss_terms.push(LossKind::Diversity);
    }
    if features.one_step {
        diagnostics.loss_terms.push(LossKind::ArcFace);
    }
    diagnostics.trained_on.extend(episode.support_ids.iter().copied());

    let (dt, f_cls) = text.episode_view(&episode.classes)?;
    let dp = if features.semantic_guidance {
        Some(combine_describe_features(&dt, config.t_s, &mut rng.substream("combine"))?)
    } else {
        None
    };

    // visual batch: prompted views, then optionally the originals
    let mut images_tokens = tokenize_all(augmented, weights)?;
    let mut labels: Vec<usize> = (0..ways * shots)
        .flat_map(|s| std::iter::repeat_n(episode.support_labels[s], config.n_v))
        .collect();
    let prompted = images_tokens.len();
    if config.originals_in_step1 {
        images_tokens.extend(tokenize_all(&episode.support, weights)?);
        labels.extend_from_slice(&episode.support_labels);
    }

    let mut prompt_opt = {
        let mut p: Vec<&Tensor> = Vec::new();
        if let Some(b) = &bank {
            p.push(b.tokens());
        }
        if let Some(d) = &deep {
            p.push(d.tokens());
        }
        if p.is_empty() { None } else { Some(Adam::new(AdamConfig::with_lr(config.lr_prompts), &p)?) }
    };
    let mut adapter_opt = match &adapter {
        Some(a) => Some(Adam::new(AdamConfig::with_lr(config.lr_adapter), &a.parameters())?),
        None => None,
    };
    let mut cls_opt = match &classifier {
        Some(c) => Some(Adam::new(AdamConfig::with_lr(config.lr_classifier), &c.parameters())?),
        None => None,
    };
    let mut select_rng = rng.substream("select");

    for it in 0..config.iterations {
        let ctx = with_iteration(it);
        let mut g = Graph::new();
        let mut bw = BoundWeights::new(weights);
        let bank_n = bank.as_ref().map(|b| g.trainable(b.tokens().clone()));
        let deep_n = deep.as_ref().map(|d| g.trainable(d.tokens().clone()));
        let l = config.prompt_length;
        let mut batch = VisualBatch {
            patch_tokens: images_tokens.iter().map(|t| g.input(t.clone())).collect(),
            diversity: vec![None; images_tokens.len()],
        };
        if let Some(bn) = bank_n {
            for i in 0..prompted {
                batch.diversity[i] = Some(g.slice_rows(bn, i * l..(i + 1) * l)?);
            }
        }
        let f_v = batch.encode(&mut g, &mut bw, deep_n).map_err(&ctx)?;

        // semantic side
        let adapter_nodes: Option<AdapterNodes> = adapter.as_ref().map(|a| a.bind(&mut g));
        let f_cls_n = g.input(f_cls.clone());
        let (semantic_n, targets) = match (&dp, adapter_nodes) {
            (Some(dp), Some(an)) => {
                let x = g.input(dp.set.features.clone());
                let f_s = an.forward(&mut g, x).map_err(&ctx)?;
                let pool = LabeledFeatures {
                    features: g.value(f_s).clone(),
                    labels: dp.set.labels.clone(),
                };
                let fv = g.value(f_v);
                let mut targets = Vec::with_capacity(labels.len());
                for (i, &y) in labels.iter().enumerate() {
                    targets.push(select_semantic_targets(
                        fv.row_slice(i),
                        y,
                        &pool,
                        &config.selection,
                        features.rank_draw,
                        &mut select_rng,
                    )?);
                }
                (f_s, targets)
            }
            _ => (f_cls_n, labels.iter().map(|&y| vec![y]).collect()),
        };

        let l_tsc = tsc_loss(&mut g, f_v, &targets, semantic_n, config.tau).map_err(&ctx)?;
        let mut prompt_loss = l_tsc;
        let mut l_div = None;
        if let (true, Some(bn)) = (features.diversity_loss, bank_n) {
            let flat = flatten_prompts(&mut g, bn, l)?;
            let ld = diversity_loss(&mut g, flat).map_err(&ctx)?;
            prompt_loss = g.add(prompt_loss, ld)?;
            l_div = Some(ld);
        }
        let mut l_cls = None;
        let cls_nodes = classifier.as_ref().map(|c| c.bind(&mut g));
        if let (Some(c), Some(nodes)) = (&classifier, &cls_nodes) {
            let lc = c.loss(&mut g, nodes, f_v, &labels, config).map_err(&ctx)?;
            prompt_loss = g.add(prompt_loss, lc)?;
            l_cls = Some(lc);
        }
        let l_se = match (adapter_nodes, &dp) {
            (Some(_), Some(dp)) => Some(
                semantic_contrastive_loss(&mut g, semantic_n, &dp.set.labels, f_cls_n, config.signed_sim)
                    .map_err(&ctx)?,
            ),
            _ => None,
        };

        let record = IterationRecord {
            iteration: it,
            l_div: l_div.map(|n| g.value(n).item()).transpose()?,
            l_se: l_se.map(|n| g.value(n).item()).transpose()?,
            l_tsc: Some(g.value(l_tsc).item()?),
            l_cls: l_cls.map(|n| g.value(n).item()).transpose()?,
        };
        for (kind, v) in [
            (LossKind::Diversity, record.l_div),
            (LossKind::SemanticContrastive, record.l_se),
            (LossKind::TargetedContrastive, record.l_tsc),
            (LossKind::ArcFace, record.l_cls),
        ] {
            if let Some(v) = v {
                LossValue::new(kind, v, it)?;
            }
        }

        let adapter_ids: Vec<NodeId> = adapter_nodes.map(|a| a.params.to_vec()).unwrap_or_default();
        let prompt_ids: Vec<NodeId> = bank_n.into_iter().chain(deep_n).collect();

        let prompt_grads = g.backward(prompt_loss)?;
        let semantic_grads = match l_se {
            Some(n) => Some(g.backward(n)?),
            None => None,
        };
        let mut snapshot = RoutingSnapshot {
            iteration: it,
            adapter_grad_in_prompt_pass: adapter_ids.iter().map(|&n| max_abs(prompt_grads.get(n))).fold(0.0, f64::max),
            prompt_grad_in_semantic_pass: semantic_grads
                .as_ref()
                .map_or(0.0, |sg| prompt_ids.iter().map(|&n| max_abs(sg.get(n))).fold(0.0, f64::max)),
            adapter_delta: 0.0,
            prompt_delta: 0.0,
        };

        // prompt update from the prompt pass only
        if let Some(opt) = prompt_opt.as_mut() {
            let mut params: Vec<&mut Tensor> = Vec::new();
            let before: Vec<Tensor> = bank.iter().map(|b| b.tokens().clone()).chain(deep.iter().map(|d| d.tokens().clone())).collect();
            if let Some(b) = bank.as_mut() {
                params.push(b.tokens_mut());
            }
            if let Some(d) = deep.as_mut() {
                params.push(d.tokens_mut());
            }
            let grads = grads_for(&prompt_grads, &prompt_ids, &before.iter().collect::<Vec<_>>());
            opt.step(&mut params, &grads.iter().collect::<Vec<_>>()).map_err(&ctx)?;
            let after: Vec<&Tensor> = bank.iter().map(|b| b.tokens()).chain(deep.iter().map(|d| d.tokens())).collect();
            snapshot.prompt_delta = before.iter().zip(after).map(|(b, a)| max_delta(b, a)).fold(0.0, f64::max);
        }
        if let (Some(c), Some(opt), Some(nodes)) = (classifier.as_mut(), cls_opt.as_mut(), &cls_nodes) {
            let grads = grads_for(&prompt_grads, &nodes.ids(), &c.parameters());
            opt.step(&mut c.parameters_mut(), &grads.iter().collect::<Vec<_>>()).map_err(&ctx)?;
        }
        // adapter update from the semantic pass only
        if let (Some(a), Some(opt), Some(sg)) = (adapter.as_mut(), adapter_opt.as_mut(), &semantic_grads) {
            let before: Vec<Tensor> = a.parameters().iter().map(|t| (*t).clone()).collect();
            let grads = grads_for(sg, &adapter_ids, &a.parameters());
            opt.step(&mut a.parameters_mut(), &grads.iter().collect::<Vec<_>>()).map_err(&ctx)?;
            snapshot.adapter_delta = before.iter().zip(a.parameters()).map(|(b, t)| max_delta(b, t)).fold(0.0, f64::max);
        }
        diagnostics.routing.push(snapshot);
        diagnostics.iterations.push(record);
    }

    Ok(Step1Output {
        state: PromptState { bank, deep, adapter },
        classifier,
        diagnostics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Original,
    Generated,
}

/// Classifier training data: per class, K originals and K·n_v generated
/// features.
#[derive(Clone, Debug)]
pub struct GeneratedFeatureSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub roles: Vec<FeatureRole>,
}

impl GeneratedFeatureSet {
    pub fn per_class_counts(&self, ways: usize) -> Vec<usize> {
        let mut counts = vec![0; ways];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Encodes images with optional per-image diversity prompts under `deep`.
/// Runs in chunks so the graph stays small.
pub fn encode_images(
    images: &[Image],
    prompts: Option<&DiversityPromptBank>,
    deep: Option<&DeepPromptStack>,
    weights: &EncoderWeights,
) -> Result<Tensor> {
    const CHUNK: usize = 64;
    if let Some(b) = prompts {
        if b.len() != images.len() {
            return Err(Error::invalid(format!("{} diversity prompts for {} images", b.len(), images.len())));
        }
    }
    let d = weights.config().embed_dim;
    let mut data = Vec::with_capacity(images.len() * d);
    for start in (0..images.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(images.len());
        let mut g = Graph::new();
        let mut bw = BoundWeights::new(weights);
        let mut batch = VisualBatch::without_prompts(
            images[start..end]
                .iter()
                .map(|im| Ok(g.input(tokenize_image(im, weights)?)))
                .collect::<Result<_>>()?,
        );
        if let Some(b) = prompts {
            for i in start..end {
                batch.diversity[i - start] = Some(g.input(b.entry(i)?));
            }
        }
        let deep_n = deep.map(|d| g.input(d.tokens().clone()));
        let out = batch.encode(&mut g, &mut bw, deep_n)?;
        data.extend_from_slice(g.value(out).data());
    }
    Tensor::matrix(images.len(), d, data)
}

/// Originals prompt-free, each augmented view with its own trained prompt,
/// all under the trained deep prompts.
pub fn generate_features(
    episode: &Episode,
    state: &PromptState,
    augmented: &[Image],
    weights: &EncoderWeights,
) -> Result<GeneratedFeatureSet> {
    let support = episode.support.len();
    if support == 0 || augmented.len() % support != 0 {
        return Err(Error::invalid(format!("{} augmented images for {} support images", augmented.len(), support)));
    }
    let n_v = augmented.len() / support;
    let originals = encode_images(&episode.support, None, state.deep.as_ref(), weights)?;
    let generated = encode_images(augmented, state.bank.as_ref(), state.deep.as_ref(), weights)?;
    let d = originals.cols();
    let mut data = originals.data().to_vec();
    data.extend_from_slice(generated.data());
    let mut labels = episode.support_labels.clone();
    labels.extend((0..support).flat_map(|s| std::iter::repeat_n(episode.support_labels[s], n_v)));
    let mut roles = vec![FeatureRole::Original; support];
    roles.extend(std::iter::repeat_n(FeatureRole::Generated, augmented.len()));
    Ok(GeneratedFeatureSet {
        features: Tensor::matrix(labels.len(), d, data)?,
        labels,
        roles,
    })
}

/// Optional adapter followed by a cosine head with one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    adapter: Option<Adapter>,
    head: Tensor,
    margin: ArcFaceConfig,
}

/// Classifier parameters bound into a graph.
pub struct ClassifierNodes {
    adapter: Option<AdapterNodes>,
    head: NodeId,
}

impl ClassifierNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.adapter.map(|a| a.params.to_vec()).unwrap_or_default();
        ids.push(self.head);
        ids
    }
}

impl Classifier {
    /// With `margin` the classifier uses an adapter and ArcFace; without it
    /// a plain cosine-softmax probe at the same scale.
    pub fn new(ways: usize, dim: usize, margin: bool, config: &PipelineConfig, rng: &mut SeededRng) -> Result<Self> {
        if ways == 0 {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        let adapter = if margin { Some(Adapter::new(dim, config.adapter_alpha, rng)?) } else { None };
        // cosine head: the scale is irrelevant, and a small one lets Adam's
        // fixed-size steps turn the rows quickly
        let std = 0.02;
        let head = Tensor::matrix(ways, dim, (0..ways * dim).map(|_| rng.normal() * std).collect())?;
        let margin = if margin {
            config.arcface
        } else {
            ArcFaceConfig { margin: 0.0, ..config.arcface }
        };
        Ok(Classifier { adapter, head, margin })
    }

    pub fn ways(&self) -> usize {
        self.head.rows()
    }

    pub fn head(&self) -> &Tensor {
        &self.head
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.adapter.as_ref().map(|a| a.parameters().to_vec()).unwrap_or_default();
        p.push(&self.head);
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = match self.adapter.as_mut() {
            Some(a) => a.parameters_mut().into_iter().collect(),
            None => Vec::new(),
        };
        p.push(&mut self.head);
        p
    }

    pub fn bind(&self, g: &mut Graph) -> ClassifierNodes {
        ClassifierNodes {
            adapter: self.adapter.as_ref().map(|a| a.bind(g)),
            head: g.trainable(self.head.clone()),
        }
    }

    fn transform(&self, g: &mut Graph, nodes: &ClassifierNodes, x: NodeId) -> Result<NodeId> {
        match nodes.adapter {
            Some(a) => a.forward(g, x),
            None => Ok(x),
        }
    }

    /// Training loss of the bound classifier on feature rows `x`.
    pub fn loss(
        &self,
        g: &mut Graph,
        nodes: &ClassifierNodes,
        x: NodeId,
        labels: &[usize],
        _config: &PipelineConfig,
    ) -> Result<NodeId> {
        let h = self.transform(g, nodes, x)?;
        if self.adapter.is_some() {
            arcface_loss(g, h, labels, nodes.head, &self.margin)
        } else {
            cosine_softmax_loss(g, h, labels, nodes.head, self.margin.scale)
        }
    }

    /// Cosine scores (no margin) for each row of `features`.
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        let h = match &self.adapter {
            Some(a) => a.forward(features)?,
            None => features.clone(),
        };
        let mut out = Tensor::zeros(h.rows(), self.ways());
        for r in 0..h.rows() {
            for c in 0..self.ways() {
                out.set(r, c, cosine(h.row_slice(r), self.head.row_slice(c)));
            }
        }
        Ok(out)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let s = self.scores(features)?;
        Ok((0..s.rows()).map(|r| argmax(s.row_slice(r))).collect())
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub struct Step2Output {
    pub classifier: Classifier,
    pub losses: Vec<f64>,
}

/// Full-batch Adam on the classifier loss.
pub fn step2_train_classifier(
    features: &Tensor,
    labels: &[usize],
    ways: usize,
    margin: bool,
    config: &PipelineConfig,
    rng: &mut SeededRng,
) -> Result<Step2Output> {
    if features.rows() == 0 || features.rows() != labels.len() {
        return Err(Error::invalid(format!("{} features with {} labels", features.rows(), labels.len())));
    }
    let mut classifier = Classifier::new(ways, features.cols(), margin, config, rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr_classifier), &classifier.parameters())?;
    let mut losses = Vec::with_capacity(config.classifier_epochs);
    for epoch in 0..config.classifier_epochs {
        let mut g = Graph::new();
        let nodes = classifier.bind(&mut g);
        let x = g.input(features.clone());
        let loss = classifier.loss(&mut g, &nodes, x, labels, config)?;
        let value = g.value(loss).item()?;
        LossValue::new(LossKind::ArcFace, value, epoch)?;
        losses.push(value);
        let grads = g.backward(loss)?;
        let gs = grads_for(&grads, &nodes.ids(), &classifier.parameters());
        opt.step(&mut classifier.parameters_mut(), &gs.iter().collect::<Vec<_>>())?;
    }
    Ok(Step2Output { classifier, losses })
}

/// Prediction for one image: encoded with the deep prompts only, no
/// diversity prompt and no text path.
pub fn infer(image: &Image, deep: Option<&DeepPromptStack>, classifier: &Classifier, weights: &EncoderWeights) -> Result<usize> {
    Ok(infer_batch(std::slice::from_ref(image), deep, classifier, weights)?[0])
}

pub fn infer_batch(
    images: &[Image],
    deep: Option<&DeepPromptStack>,
    classifier: &Classifier,
    weights: &EncoderWeights,
) -> Result<Vec<usize>> {
    let f = encode_images(images, None, deep, weights)?;
    classifier.predict(&f)
}

pub struct VariantOutcome {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub diagnostics: Diagnostics,
}

/// Trained artifacts of one episode, before evaluation on the query set.
pub struct TrainedEpisode {
    pub state: PromptState,
    pub classifier: Classifier,
    pub features: GeneratedFeatureSet,
    pub diagnostics: Diagnostics,
}

pub fn train_episode(
    episode: &Episode,
    text: &TextFeatureCache,
    weights: &EncoderWeights,
    config: &PipelineConfig,
    rng: &SeededRng,
) -> Result<TrainedEpisode> {
    let features = config.variant.features();
    let enc = weights.config();
    let augmented = augment_support(
        &episode.support,
        config.n_v,
        enc.patch_size,
        true,
        &mut rng.substream("augment"),
    )?;
    let ways = episode.ways();
    if config.variant == Variant::ClipBase {
        config.validate(episode.shots(), text.descriptions_per_class())?;
        let state = PromptState {
            bank: None,
            deep: None,
            adapter: None,
        };
        let generated = generate_features(episode, &state, &augmented, weights)?;
        let step2 = step2_train_classifier(
            &generated.features,
            &generated.labels,
            ways,
            false,
            config,
            &mut rng.substream("classifier-init"),
        )?;
        let diagnostics = Diagnostics {
            phases: 1,
            classifier_losses: step2.losses,
            trained_on: episode.support_ids.iter().copied().collect(),
            ..Default::default()
        };
        return Ok(TrainedEpisode {
            state,
            classifier: step2.classifier,
            features: generated,
            diagnostics,
        });
    }
    let step1 = step1_train(episode, &augmented, text, weights, config, rng)?;
    let generated = generate_features(episode, &step1.state, &augmented, weights)?;
    let mut diagnostics = step1.diagnostics;
    let classifier = match step1.classifier {
        Some(c) => c,
        None => {
            let step2 = step2_train_classifier(
                &generated.features,
                &generated.labels,
                ways,
                features.margin_classifier,
                config,
                &mut rng.substream("classifier-init"),
            )?;
            diagnostics.classifier_losses = step2.losses;
            step2.classifier
        }
    };
    Ok(TrainedEpisode {
        state: step1.state,
        classifier,
        features: generated,
        diagnostics,
    })
}

/// Trains on the support set and scores the query set.
pub fn run_variant(
    episode: &Episode,
    text: &TextFeatureCache,
    weights: &EncoderWeights,
    config: &PipelineConfig,
    rng: &SeededRng,
) -> Result<VariantOutcome> {
    let trained = train_episode(episode, text, weights, config, rng)?;
    let predictions = infer_batch(&episode.query, trained.state.deep.as_ref(), &trained.classifier, weights)?;
    let correct = predictions.iter().zip(&episode.query_labels).filter(|(p, y)| p == y).count();
    Ok(VariantOutcome {
        accuracy: correct as f64 / episode.query.len().max(1) as f64,
        predictions,
        diagnostics: trained.diagnostics,
    })
}

/// A pipeline variant as an evaluation method.
pub struct PipelineMethod<'a> {
    pub text: &'a TextFeatureCache,
    pub weights: &'a EncoderWeights,
    pub config: PipelineConfig,
}

impl EpisodeMethod for PipelineMethod<'_> {
    fn name(&self) -> String {
        self.config.variant.name().to_string()
    }

    fn predict(&self, episode: &Episode, rng: &SeededRng) -> Result<Vec<usize>> {
        Ok(run_variant(episode, self.text, self.weights, &self.config, rng)?.predictions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(n: usize) -> Image {
        let mut im = Image::zeros(n, n, 3);
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    im.set(y, x, c, ((y * n + x) * 3 + c) as f32 / (n * n * 3) as f32);
                }
            }
        }
        im
    }

    #[test]
    fn identity_augmentation_is_a_copy() {
        let im = gradient_image(8);
        assert_eq!(augment_image(&im, AugmentParams::IDENTITY), im);
    }

    #[test]
    fn flip_and_translate() {
        let im = gradient_image(8);
        let f = augment_image(&im, AugmentParams { flip: true, ..AugmentParams::IDENTITY });
        assert_eq!(f.at(2, 0, 1), im.at(2, 7, 1));
        let t = augment_image(&im, AugmentParams { dx: 2, ..AugmentParams::IDENTITY });
        assert_eq!(t.at(3, 5, 0), im.at(3, 3, 0));
        // edge padding repeats the border column
        assert_eq!(t.at(3, 0, 0), im.at(3, 0, 0));
        assert_eq!(t.at(3, 1, 0), im.at(3, 0, 0));
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let im = gradient_image(6);
        let once = augment_image(&im, AugmentParams { quarter_turns: 1, ..AugmentParams::IDENTITY });
        assert_ne!(once, im);
        assert_eq!(once.at(5, 0, 0), im.at(0, 0, 0));
        let mut r = im.clone();
        for _ in 0..4 {
            r = rotate_quarter(&r);
        }
        assert_eq!(r, im);
    }

    #[test]
    fn augmentation_counts_and_determinism() {
        let support: Vec<Image> = (0..25).map(|_| gradient_image(8)).collect();
        let a = augment_support(&support, 4, 8, false, &mut SeededRng::new(3)).unwrap();
        let b = augment_support(&support, 4, 8, false, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert!(augment_support(&support, 0, 8, false, &mut SeededRng::new(3)).is_err());
    }

    #[test]
    fn translation_stays_within_half_patch() {
        let mut rng = SeededRng::new(1);
        for _ in 0..500 {
            let p = AugmentParams::sample(8, false, &mut rng);
            assert!(p.dx.abs() <= 4 && p.dy.abs() <= 4 && p.quarter_turns == 0);
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("b9".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn b3_and_b4_differ_only_in_rank_draw() {
        let (b3, b4) = (Variant::B3.features(), Variant::B4.features());
        assert_eq!(b3.rank_draw, RankDraw::Top);
        assert_eq!(VariantFeatures { rank_draw: RankDraw::Gamma, ..b3 }, b4);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[0.3, 0.3]), 0);
    }

    #[test]
    fn budget_validation() {
        let cfg = PipelineConfig {
            variant: Variant::B1,
            n_v: 4,
            ..Default::default()
        };
        assert!(cfg.validate(5, 6).is_ok());
        assert!(cfg.validate(1, 6).is_err());
        let cfg = PipelineConfig { n_v: 24, ..cfg };
        assert!(cfg.validate(1, 6).is_ok());
    }

    fn separable(ways: usize, per_class: usize, dim: usize, rng: &mut SeededRng) -> (Tensor, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for y in 0..ways {
            for _ in 0..per_class {
                let mut r: Vec<f64> = (0..dim).map(|_| rng.normal() * 0.05).collect();
                r[y] += 1.0;
                rows.push(r);
                labels.push(y);
            }
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn classifier_fits_separable_features() {
        let mut rng = SeededRng::new(7);
        let (x, y) = separable(5, 25, 16, &mut rng);
        let cfg = PipelineConfig::default();
        let out = step2_train_classifier(&x, &y, 5, true, &cfg, &mut rng).unwrap();
        assert_eq!(out.classifier.predict(&x).unwrap(), y);
        assert!(out.losses.last().unwrap() < &out.losses[0]);
    }

    #[test]
    fn zero_epochs_returns_initial_classifier() {
        let mut rng = SeededRng::new(7);
        let (x, y) = separable(3, 4, 8, &mut rng);
        let cfg = PipelineConfig {
            classifier_epochs: 0,
            ..Default::default()
        };
        let out = step2_train_classifier(&x, &y, 3, true, &cfg, &mut SeededRng::new(2)).unwrap();
        let fresh = Classifier::new(3, 8, true, &cfg, &mut SeededRng::new(2)).unwrap();
        assert_eq!(out.classifier, fresh);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn step2_rejects_mismatched_labels() {
        let mut rng = SeededRng::new(7);
        let (x, _) = separable(3, 4, 8, &mut rng);
        assert!(step2_train_classifier(&x, &[0, 1], 3, true, &PipelineConfig::default(), &mut rng).is_err());
    }
}
