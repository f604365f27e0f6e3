//! Text side: description corpora, the F_dt → F_dp → F_s feature stages,
//! class-prompt anchors F_cls, the residual adapter and cross-modal target
//! selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_text_batch, EncoderWeights};
use crate::numerics::{cosine, l2_norm, Graph, NodeId, SeededRng, Tensor, NORM_EPS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDescriptions {
    pub name: String,
    pub descriptions: Vec<String>,
}

/// Per-domain class descriptions plus the sentence template they are
/// rendered through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionCorpus {
    pub domain: String,
    pub template: String,
    pub classes: Vec<ClassDescriptions>,
}

impl DescriptionCorpus {
    pub fn from_json(text: &str) -> Result<Self> {
        let corpus: DescriptionCorpus = serde_json::from_str(text)?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format(format!("{}: {}", path.display(), j)),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        for slot in ["[Domain]", "[Class]"] {
            if !self.template.contains(slot) {
                return Err(Error::invalid(format!("corpus template {:?} is missing {}", self.template, slot)));
            }
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("corpus has no classes"));
        }
        for c in &self.classes {
            if c.descriptions.is_empty() || c.descriptions.iter().any(|d| d.trim().is_empty()) {
                return Err(Error::invalid(format!("class {:?} has an empty description list or entry", c.name)));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Corpus restricted to the given classes, in that order.
    pub fn subset(&self, classes: &[usize]) -> Result<DescriptionCorpus> {
        let picked = classes
            .iter()
            .map(|&i| {
                self.classes
                    .get(i)
                    .cloned()
                    .ok_or(Error::OutOfRange { index: i, len: self.classes.len() })
            })
            .collect::<Result<_>>()?;
        Ok(DescriptionCorpus {
            domain: self.domain.clone(),
            template: self.template.clone(),
            classes: picked,
        })
    }

    /// Fills the template. Descriptions are lowercased; a missing
    /// description leaves the plain class prompt.
    pub fn render(&self, class: usize, description: Option<&str>) -> Result<String> {
        let c = self
            .classes
            .get(class)
            .ok_or(Error::OutOfRange { index: class, len: self.classes.len() })?;
        if description.is_some() && !self.template.contains("[Description]") {
            return Err(Error::invalid(format!("corpus template {:?} has no [Description] slot", self.template)));
        }
        let filled = self
            .template
            .replace("[Domain]", &self.domain)
            .replace("[Class]", &c.name)
            .replace("[Description]", &description.unwrap_or("").to_lowercase());
        let mut out = filled.split_whitespace().collect::<Vec<_>>().join(" ");
        for p in [".", ",", ";", ":", "!", "?"] {
            out = out.replace(&format!(" {p}"), p);
        }
        Ok(out)
    }

    /// Largest description count; shorter lists are cycled up to it.
    pub fn descriptions_per_class(&self) -> usize {
        self.classes.iter().map(|c| c.descriptions.len()).max().unwrap_or(0)
    }
}

/// Row-stacked features with a class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of class `y`, ascending.
    pub fn class_rows(&self, y: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == y)
            .map(|(i, _)| i)
            .collect()
    }
}

/// F_dt: `n_s` encoded descriptions per class.
#[derive(Clone, Debug, PartialEq)]
pub struct DescribeFeatureSet {
    pub set: LabeledFeatures,
    pub per_class: usize,
}

/// F_dp: `t_s·n_s` unit-norm combinations per class.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedFeatureSet {
    pub set: LabeledFeatures,
    pub per_class: usize,
}

pub fn build_describe_features(corpus: &DescriptionCorpus, weights: &EncoderWeights) -> Result<DescribeFeatureSet> {
    corpus.validate()?;
    let n_s = corpus.descriptions_per_class();
    let mut texts = Vec::with_capacity(corpus.classes.len() * n_s);
    let mut labels = Vec::with_capacity(texts.capacity());
    for (y, c) in corpus.classes.iter().enumerate() {
        for k in 0..n_s {
            let desc = &c.descriptions[k % c.descriptions.len()];
            texts.push(corpus.render(y, Some(desc))?);
            labels.push(y);
        }
    }
    Ok(DescribeFeatureSet {
        set: LabeledFeatures {
            features: encode_text_batch(&texts, weights)?,
            labels,
        },
        per_class: n_s,
    })
}

/// F_cls: one adapter-free class prompt embedding per class.
pub fn build_class_prompt_features(corpus: &DescriptionCorpus, weights: &EncoderWeights) -> Result<Tensor> {
    corpus.validate()?;
    let texts = (0..corpus.classes.len())
        .map(|y| corpus.render(y, None))
        .collect::<Result<Vec<_>>>()?;
    encode_text_batch(&texts, weights)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v).max(NORM_EPS);
    v.iter().map(|x| x / n).collect()
}

pub fn combine_describe_features(dt: &DescribeFeatureSet, t_s: usize, rng: &mut SeededRng) -> Result<CombinedFeatureSet> {
    let n_s = dt.per_class;
    if t_s == 0 {
        return Err(Error::invalid("t_s must be >= 1"));
    }
    if t_s > 1 && n_s < 2 {
        return Err(Error::invalid(format!("cannot combine with n_s = {n_s} descriptions per class")));
    }
    let d = dt.set.features.cols();
    let classes = dt.set.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut data = Vec::with_capacity(classes * t_s * n_s * d);
    let mut labels = Vec::with_capacity(classes * t_s * n_s);
    for y in 0..classes {
        let rows = dt.set.class_rows(y);
        if t_s == 1 {
            for &r in &rows {
                data.extend(normalized(dt.set.features.row_slice(r)));
                labels.push(y);
            }
            continue;
        }
        for _ in 0..t_s * n_s {
            let size = 2 + rng.below(n_s - 1);
            let mut mean = vec![0.0; d];
            for i in rng.sample_indices(rows.len(), size) {
                for (m, v) in mean.iter_mut().zip(dt.set.features.row_slice(rows[i])) {
                    *m += v;
                }
            }
            data.extend(normalized(&mean));
            labels.push(y);
        }
    }
    Ok(CombinedFeatureSet {
        set: LabeledFeatures {
            features: Tensor::matrix(labels.len(), d, data)?,
            labels,
        },
        per_class: t_s * n_s,
    })
}

/// Residual bottleneck MLP: `α·MLP(x) + (1−α)·x` with widths `d → d → d/4 → d`
/// and ReLU after the first two layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub alpha: f64,
    params: [Tensor; 6],
}

/// Adapter parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct AdapterNodes {
    pub params: [NodeId; 6],
    alpha: f64,
}

impl Adapter {
    pub fn new(dim: usize, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        if dim < 4 {
            return Err(Error::invalid(format!("adapter needs dim >= 4, got {dim}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("adapter alpha must be in [0, 1], got {alpha}")));
        }
        let hidden = dim / 4;
        let mut dense = |fan_in: usize, fan_out: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            Tensor::matrix(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.normal() * std).collect()).expect("sized")
        };
        let params = [
            dense(dim, dim),
            Tensor::zeros(1, dim),
            dense(dim, hidden),
            Tensor::zeros(1, hidden),
            dense(hidden, dim),
            Tensor::zeros(1, dim),
        ];
        Ok(Adapter { alpha, params })
    }

    pub fn from_parameters(alpha: f64, params: [Tensor; 6]) -> Result<Self> {
        let d = params[0].rows();
        let h = params[2].cols();
        let expect = [[d, d], [1, d], [d, h], [1, h], [h, d], [1, d]];
        for (p, e) in params.iter().zip(expect) {
            if p.shape() != e {
                return Err(Error::shape("adapter", format!("parameter {:?}, expected {:?}", p.shape(), e)));
            }
        }
        Ok(Adapter { alpha, params })
    }

    pub fn dim(&self) -> usize {
        self.params[0].rows()
    }

    pub fn parameters(&self) -> [&Tensor; 6] {
        let [a, b, c, d, e, f] = &self.params;
        [a, b, c, d, e, f]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 6] {
        let [a, b, c, d, e, f] = &mut self.params;
        [a, b, c, d, e, f]
    }

    /// Zeroes the last layer's weight, leaving its bias.
    pub fn zero_final_weight(&mut self) {
        self.params[4].data_mut().fill(0.0);
    }

    pub fn bind(&self, g: &mut Graph) -> AdapterNodes {
        AdapterNodes {
            params: self.params.clone().map(|p| g.trainable(p)),
            alpha: self.alpha,
        }
    }

    /// Plain forward over `[n, d]` rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let xin = g.input(x.clone());
        let out = nodes.forward(&mut g, xin)?;
        Ok(g.value(out).clone())
    }
}

impl AdapterNodes {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let [w1, b1, w2, b2, w3, b3] = self.params;
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.relu(h)?;
        let h = g.linear(h, w2, Some(b2))?;
        let h = g.relu(h)?;
        let h = g.linear(h, w3, Some(b3))?;
        let h = g.scale(h, self.alpha)?;
        let skip = g.scale(x, 1.0 - self.alpha)?;
        g.add(h, skip)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Size of the same-class pool kept after ranking.
    pub c: usize,
    /// Distinct targets drawn from the pool.
    pub m: usize,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            c: 300,
            m: 100,
            gamma_shape: 2.0,
            gamma_scale: 75.0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.c {
            return Err(Error::invalid(format!("selection needs 1 <= m <= c, got m = {}, c = {}", self.m, self.c)));
        }
        if !(self.gamma_shape > 0.0) || !(self.gamma_scale > 0.0) {
            return Err(Error::invalid("selection gamma parameters must be positive"));
        }
        Ok(())
    }
}

/// How ranks are drawn from the top-c pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankDraw {
    Gamma,
    /// Ranks `0..m` directly.
    Top,
}

/// `pool` sorted by descending cosine to `v`, ties to the lower index,
/// truncated to `c`.
pub fn top_c(v: &[f64], features: &Tensor, pool: &[usize], c: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = pool.iter().map(|&i| (cosine(v, features.row_slice(i)), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(c);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// One rank draw: floor of a Gamma sample, clamped to `[0, c−1]`. Also
/// returns the raw sample.
pub fn draw_rank(config: &SelectionConfig, rng: &mut SeededRng) -> Result<(usize, f64)> {
    let raw = rng.gamma(config.gamma_shape, config.gamma_scale)?;
    Ok(((raw.floor() as usize).min(config.c - 1), raw))
}

/// Picks `m` distinct same-class targets for visual feature `v`; returns
/// row indices into `semantic`.
pub fn select_semantic_targets(
    v: &[f64],
    class: usize,
    semantic: &LabeledFeatures,
    config: &SelectionConfig,
    draw: RankDraw,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    config.validate()?;
    let pool = semantic.class_rows(class);
    if pool.len() < config.c {
        return Err(Error::invalid(format!(
            "class {} has {} semantic features, selection needs c = {}",
            class,
            pool.len(),
            config.c
        )));
    }
    let ranked = top_c(v, &semantic.features, &pool, config.c);
    match draw {
        RankDraw::Top => Ok(ranked[..config.m].to_vec()),
        RankDraw::Gamma => {
            let mut taken = vec![false; config.c];
            let mut picks = Vec::with_capacity(config.m);
            let budget = 10_000 * config.c;
            for _ in 0..budget {
                let (rank, _) = draw_rank(config, rng)?;
                if !taken[rank] {
                    taken[rank] = true;
                    picks.push(ranked[rank]);
                    if picks.len() == config.m {
                        return Ok(picks);
                    }
                }
            }
            Err(Error::invalid(format!(
                "rank distribution Gamma({}, {}) could not fill {} distinct picks from c = {}",
                config.gamma_shape, config.gamma_scale, config.m, config.c
            )))
        }
    }
}
