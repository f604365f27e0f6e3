//! Scalar training objectives, built as graph nodes.
//!
//! - diversity loss: mean absolute pairwise cosine between diversity prompts
//! - semantic contrastive loss: softmax over |cos| between adapted semantic
//!   features and class-prompt anchors
//! - targeted supervised contrastive loss: each visual feature against its
//!   selected semantic targets, denominator over the whole semantic set
//! - ArcFace: cosine classifier with an additive angular margin

use serde::{Deserialize, Serialize};

use crate::numerics::{gradient_pair, Axis, Graph, NodeId, SeededRng, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Diversity,
    SemanticContrastive,
    TargetedContrastive,
    ArcFace,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Diversity,
        LossKind::SemanticContrastive,
        LossKind::TargetedContrastive,
        LossKind::ArcFace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Diversity => "L_div",
            LossKind::SemanticContrastive => "L_se",
            LossKind::TargetedContrastive => "L_TSC",
            LossKind::ArcFace => "L_cls",
        }
    }
}

/// A evaluated loss with the step it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub kind: LossKind,
    pub value: f64,
    pub step: usize,
}

impl LossValue {
    pub fn new(kind: LossKind, value: f64, step: usize) -> Result<Self> {
        let ok = value.is_finite()
            && match kind {
                // rounding can put |cos| a hair above 1
                LossKind::Diversity => (-1e-12..=1.0 + 1e-12).contains(&value),
                _ => value >= -1e-12,
            };
        if !ok {
            return Err(Error::NonFinite(format!(
                "{} = {} at step {} is outside its valid range",
                kind.name(),
                value,
                step
            )));
        }
        Ok(LossValue { kind, value, step })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcFaceConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        ArcFaceConfig {
            scale: 30.0,
            margin: 0.5,
        }
    }
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "ArcFace needs scale > 0 and margin in [0, pi/2), got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Reshapes a `[N_v·l, d]` token matrix into `[N_v, l·d]` prompt vectors.
pub fn flatten_prompts(g: &mut Graph, tokens: NodeId, length: usize) -> Result<NodeId> {
    if length == 1 {
        return Ok(tokens);
    }
    let rows = g.value(tokens).rows();
    if length == 0 || rows % length != 0 {
        return Err(Error::shape("flatten_prompts", format!("{rows} rows, l = {length}")));
    }
    let mut entries = Vec::with_capacity(rows / length);
    for i in 0..rows / length {
        let toks: Vec<NodeId> = (0..length)
            .map(|t| g.slice_rows(tokens, i * length + t..i * length + t + 1))
            .collect::<Result<_>>()?;
        entries.push(g.concat(&toks, Axis::Cols)?);
    }
    g.concat(&entries, Axis::Rows)
}

fn one_hot(rows: usize, cols: usize, labels: &[usize]) -> Result<Tensor> {
    let mut t = Tensor::zeros(rows, cols);
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::invalid(format!("label {y} outside [0, {cols})")));
        }
        t.set(r, y, 1.0);
    }
    Ok(t)
}

/// `−(1/rows) Σ_r Σ_c weights[r,c] · log softmax(logits)[r,c]`
fn weighted_log_softmax(g: &mut Graph, logits: NodeId, weights: Tensor) -> Result<NodeId> {
    let rows = g.value(logits).rows();
    let sm = g.softmax(logits)?;
    let lg = g.log(sm)?;
    let w = g.input(weights);
    let picked = g.mul(lg, w)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / rows as f64)
}

/// Diversity loss over prompt vectors `[N_v, l·d]`.
pub fn diversity_loss(g: &mut Graph, prompts: NodeId) -> Result<NodeId> {
    let n = g.value(prompts).rows();
    if n < 2 {
        return Err(Error::invalid(format!("diversity loss needs N_v >= 2, got {n}")));
    }
    let p = g.l2_normalize(prompts)?;
    let pt = g.transpose(p)?;
    let cos = g.matmul(p, pt)?;
    let cos = g.abs(cos)?;
    let mut mask = Tensor::full(n, n, 1.0);
    for i in 0..n {
        mask.set(i, i, 0.0);
    }
    let mask = g.input(mask);
    let off = g.mul(cos, mask)?;
    let total = g.sum(off)?;
    g.scale(total, 1.0 / (n * (n - 1)) as f64)
}

/// Semantic contrastive loss between adapted semantic features `[N_s, d]`
/// and class-prompt features `[N, d]`. `signed_sim` drops the absolute value.
pub fn semantic_contrastive_loss(
    g: &mut Graph,
    semantic: NodeId,
    labels: &[usize],
    class_prompts: NodeId,
    signed_sim: bool,
) -> Result<NodeId> {
    let ns = g.value(semantic).rows();
    let n = g.value(class_prompts).rows();
    if labels.len() != ns {
        return Err(Error::shape("semantic_contrastive_loss", format!("{} labels for {} features", labels.len(), ns)));
    }
    let sim = g.cosine_similarity(semantic, class_prompts)?;
    let sim = if signed_sim { sim } else { g.abs(sim)? };
    weighted_log_softmax(g, sim, one_hot(ns, n, labels)?)
}

/// Targeted supervised contrastive loss. `targets[i]` lists indices into the
/// semantic set; the semantic features are detached so gradients reach only
/// the visual side.
pub fn tsc_loss(
    g: &mut Graph,
    visual: NodeId,
    targets: &[Vec<usize>],
    semantic: NodeId,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let nv = g.value(visual).rows();
    let ns = g.value(semantic).rows();
    if targets.len() != nv {
        return Err(Error::shape("tsc_loss", format!("{} target lists for {} visual features", targets.len(), nv)));
    }
    let mut w = Tensor::zeros(nv, ns);
    for (i, t) in targets.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::invalid(format!("visual feature {i} has no targets")));
        }
        let share = 1.0 / t.len() as f64;
        for &j in t {
            if j >= ns {
                return Err(Error::invalid(format!(
                    "target {j} of visual feature {i} is not in the semantic set (size {ns})"
                )));
            }
            w.set(i, j, w.get(i, j) + share);
        }
    }
    let fixed = g.detach(semantic)?;
    let sim = g.cosine_similarity(visual, fixed)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    weighted_log_softmax(g, logits, w)
}

/// ArcFace cross-entropy of `features [B, d]` against `class_weights [N, d]`.
pub fn arcface_loss(
    g: &mut Graph,
    features: NodeId,
    labels: &[usize],
    class_weights: NodeId,
    config: &ArcFaceConfig,
) -> Result<NodeId> {
    config.validate()?;
    let b = g.value(features).rows();
    let n = g.value(class_weights).rows();
    if labels.len() != b {
        return Err(Error::shape("arcface_loss", format!("{} labels for {} features", labels.len(), b)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::invalid(format!("label {bad} outside [0, {n})")));
    }
    let cos = g.cosine_similarity(features, class_weights)?;
    let cos = g.angular_margin(cos, labels.to_vec(), config.margin)?;
    let logits = g.scale(cos, config.scale)?;
    weighted_log_softmax(g, logits, one_hot(b, n, labels)?)
}

/// Plain cosine-softmax cross-entropy with logit scale `s` (no margin).
pub fn cosine_softmax_loss(
    g: &mut Graph,
    features: NodeId,
    labels: &[usize],
    class_weights: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let b = g.value(features).rows();
    let n = g.value(class_weights).rows();
    if labels.len() != b {
        return Err(Error::shape("cosine_softmax_loss", format!("{} labels for {} features", labels.len(), b)));
    }
    let cos = g.cosine_similarity(features, class_weights)?;
    let logits = g.scale(cos, scale)?;
    weighted_log_softmax(g, logits, one_hot(b, n, labels)?)
}

fn evaluate(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let l = build(&mut g)?;
    g.value(l).item()
}

pub fn diversity_loss_value(prompts: &Tensor) -> Result<f64> {
    evaluate(|g| {
        let p = g.input(prompts.clone());
        diversity_loss(g, p)
    })
}

pub fn semantic_contrastive_value(semantic: &Tensor, labels: &[usize], class_prompts: &Tensor) -> Result<f64> {
    evaluate(|g| {
        let s = g.input(semantic.clone());
        let c = g.input(class_prompts.clone());
        semantic_contrastive_loss(g, s, labels, c, false)
    })
}

pub fn tsc_value(visual: &Tensor, targets: &[Vec<usize>], semantic: &Tensor, tau: f64) -> Result<f64> {
    evaluate(|g| {
        let v = g.input(visual.clone());
        let s = g.input(semantic.clone());
        tsc_loss(g, v, targets, s, tau)
    })
}

pub fn arcface_value(features: &Tensor, labels: &[usize], class_weights: &Tensor, config: &ArcFaceConfig) -> Result<f64> {
    evaluate(|g| {
        let f = g.input(features.clone());
        let w = g.input(class_weights.clone());
        arcface_loss(g, f, labels, w, config)
    })
}

/// Outcome of the finite-difference suite for one loss.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckResult {
    pub loss: LossKind,
    pub configurations: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub configurations: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates the analytic gradient of one loss; exercises the failure path.
    pub flip_sign: Option<LossKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            configurations: 20,
            eps: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            flip_sign: None,
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("sized")
}

/// Runs one random configuration of `kind` and returns its max relative error.
pub fn grad_check_once(kind: LossKind, rng: &mut SeededRng, eps: f64, flip: bool) -> Result<f64> {
    let d = 4 + rng.below(4);
    let pair = match kind {
        LossKind::Diversity => {
            let n = 3 + rng.below(5);
            let point = random_matrix(n, d, rng);
            gradient_pair(|g, x| diversity_loss(g, x), &point, eps)?
        }
        LossKind::SemanticContrastive => {
            let classes = 3 + rng.below(3);
            let ns = classes * (2 + rng.below(3));
            let labels: Vec<usize> = (0..ns).map(|i| i % classes).collect();
            let anchors = random_matrix(classes, d, rng);
            let point = random_matrix(ns, d, rng);
            gradient_pair(
                |g, x| {
                    let c = g.input(anchors);
                    semantic_contrastive_loss(g, x, &labels, c, false)
                },
                &point,
                eps,
            )?
        }
        LossKind::TargetedContrastive => {
            let nv = 2 + rng.below(4);
            let ns = 8 + rng.below(8);
            let m = 1 + rng.below(3);
            let semantic = random_matrix(ns, d, rng);
            let targets: Vec<Vec<usize>> = (0..nv).map(|_| rng.sample_indices(ns, m)).collect();
            let point = random_matrix(nv, d, rng);
            let tau = 0.07 + rng.uniform() * 0.5;
            gradient_pair(
                |g, x| {
                    let s = g.input(semantic);
                    tsc_loss(g, x, &targets, s, tau)
                },
                &point,
                eps,
            )?
        }
        LossKind::ArcFace => {
            let classes = 2 + rng.below(4);
            let b = 3 + rng.below(5);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(classes)).collect();
            let weights = random_matrix(classes, d, rng);
            let point = random_matrix(b, d, rng);
            let cfg = ArcFaceConfig {
                scale: 1.0 + rng.uniform() * 10.0,
                margin: rng.uniform() * 0.6,
            };
            gradient_pair(
                |g, x| {
                    let w = g.input(weights);
                    arcface_loss(g, x, &labels, w, &cfg)
                },
                &point,
                eps,
            )?
        }
    };
    let mut analytic = pair.analytic;
    if flip {
        analytic = analytic.map(|v| -v);
    }
    Ok(crate::numerics::relative_error(analytic.data(), pair.numeric.data()))
}

/// Finite-difference gradient checks for every loss.
pub fn grad_check_suite(options: &GradCheckOptions) -> Result<Vec<GradCheckResult>> {
    let root = SeededRng::new(options.seed).substream("grad-check");
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let mut worst: f64 = 0.0;
            for c in 0..options.configurations {
                let mut rng = root.substream_indexed(kind.name(), c);
                let err = grad_check_once(kind, &mut rng, options.eps, options.flip_sign == Some(kind))?;
                worst = worst.max(err);
            }
            Ok(GradCheckResult {
                loss: kind,
                configurations: options.configurations,
                max_relative_error: worst,
                passed: worst < options.tolerance,
            })
        })
        .collect()
}
