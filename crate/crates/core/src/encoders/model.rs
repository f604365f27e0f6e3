use std::collections::HashMap;
use std::ops::Range;

use super::{text_token_ids, tokenize_image, EncoderConfig, EncoderWeights, Image, TokenSequence};
use crate::numerics::{Axis, Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Frozen weights bound into one graph as leaves, created on first use.
///
/// A binding belongs to the graph it was first used with.
pub struct BoundWeights<'w> {
    weights: &'w EncoderWeights,
    ids: HashMap<String, NodeId>,
}

impl<'w> BoundWeights<'w> {
    pub fn new(weights: &'w EncoderWeights) -> Self {
        BoundWeights {
            weights,
            ids: HashMap::new(),
        }
    }

    pub fn weights(&self) -> &'w EncoderWeights {
        self.weights
    }

    pub fn config(&self) -> &'w EncoderConfig {
        self.weights.config()
    }

    pub fn node(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let id = g.frozen(self.weights.get(name)?.clone());
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn affine_norm(&mut self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = self.node(g, &format!("{prefix}.gain"))?;
        let bias = self.node(g, &format!("{prefix}.bias"))?;
        let n = g.layer_norm(x)?;
        let n = g.mul(n, gain)?;
        g.add(n, bias)
    }

    fn dense(&mut self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.node(g, &format!("{prefix}.weight"))?;
        let b = self.node(g, &format!("{prefix}.bias"))?;
        g.linear(x, w, Some(b))
    }
}

/// Pre-norm transformer block over row-stacked sequences.
///
/// With `readout`, only the given row of each sequence is carried past the
/// attention (queries are computed for that row alone), which is exact for
/// a final layer whose other outputs are discarded.
fn block(
    g: &mut Graph,
    bw: &mut BoundWeights,
    prefix: &str,
    x: NodeId,
    seqs: &[Range<usize>],
    readout: Option<&[usize]>,
) -> Result<NodeId> {
    let cfg = bw.config();
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    let h = bw.affine_norm(g, x, &format!("{prefix}.ln1"))?;
    let qkv = bw.dense(g, h, &format!("{prefix}.attn.qkv"))?;

    let mut seq_outs = Vec::with_capacity(seqs.len());
    let mut kept = Vec::new();
    for (i, rows) in seqs.iter().enumerate() {
        let q_rows = match readout {
            Some(r) => rows.start + r[i]..rows.start + r[i] + 1,
            None => rows.clone(),
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let cols = head * hd..(head + 1) * hd;
            let q = g.slice(qkv, q_rows.clone(), cols.clone())?;
            let k = g.slice(qkv, rows.clone(), d + cols.start..d + cols.end)?;
            let v = g.slice(qkv, rows.clone(), 2 * d + cols.start..2 * d + cols.end)?;
            let kt = g.transpose(k)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, inv_sqrt)?;
            let att = g.softmax(logits)?;
            heads.push(g.matmul(att, v)?);
        }
        seq_outs.push(g.concat(&heads, Axis::Cols)?);
        if readout.is_some() {
            kept.push(g.slice_rows(x, q_rows)?);
        }
    }
    let attn = g.concat(&seq_outs, Axis::Rows)?;
    let attn = bw.dense(g, attn, &format!("{prefix}.attn.out"))?;
    let base = if readout.is_some() {
        g.concat(&kept, Axis::Rows)?
    } else {
        x
    };
    let x = g.add(base, attn)?;

    let h = bw.affine_norm(g, x, &format!("{prefix}.ln2"))?;
    let h = bw.dense(g, h, &format!("{prefix}.mlp.fc1"))?;
    let h = g.gelu(h)?;
    let h = bw.dense(g, h, &format!("{prefix}.mlp.fc2"))?;
    g.add(x, h)
}

/// Images to encode together in one graph.
///
/// `patch_tokens[i]` is the `[patches, d]` output of `tokenize_image` bound
/// as a graph node; `diversity[i]` optionally holds that image's `[l, d]`
/// diversity prompt.
pub struct VisualBatch {
    pub patch_tokens: Vec<NodeId>,
    pub diversity: Vec<Option<NodeId>>,
}

impl VisualBatch {
    pub fn without_prompts(patch_tokens: Vec<NodeId>) -> Self {
        let n = patch_tokens.len();
        VisualBatch {
            patch_tokens,
            diversity: vec![None; n],
        }
    }

    /// Final CLS states through the frozen projection, one row per image,
    /// unnormalised. `deep` is the `[layers·p, d]` deep prompt stack.
    pub fn encode(&self, g: &mut Graph, bw: &mut BoundWeights, deep: Option<NodeId>) -> Result<NodeId> {
        let cfg = bw.config();
        let d = cfg.embed_dim;
        let layers = cfg.layers;
        if self.patch_tokens.len() != self.diversity.len() || self.patch_tokens.is_empty() {
            return Err(Error::shape(
                "encode_visual",
                format!("{} images, {} prompt slots", self.patch_tokens.len(), self.diversity.len()),
            ));
        }
        let per_layer = match deep {
            Some(dn) => {
                let v = g.value(dn);
                if v.cols() != d || v.rows() % layers != 0 {
                    return Err(Error::shape(
                        "encode_visual",
                        format!("deep prompt stack is {:?}, need [{} x p, {}]", v.shape(), layers, d),
                    ));
                }
                let p = v.rows() / layers;
                let mut groups = Vec::with_capacity(layers);
                for l in 0..layers {
                    groups.push(g.slice_rows(dn, l * p..(l + 1) * p)?);
                }
                Some((p, groups))
            }
            None => None,
        };
        let p = per_layer.as_ref().map_or(0, |(p, _)| *p);
        let cls = bw.node(g, "visual.cls_token")?;

        let mut parts = Vec::new();
        let mut seqs = Vec::with_capacity(self.patch_tokens.len());
        let mut start = 0;
        for (&tokens, div) in self.patch_tokens.iter().zip(&self.diversity) {
            let tv = g.value(tokens);
            if tv.cols() != d {
                return Err(Error::shape("encode_visual", format!("patch tokens are {:?}", tv.shape())));
            }
            let n_patches = tv.rows();
            parts.push(cls);
            if let Some((_, groups)) = &per_layer {
                parts.push(groups[0]);
            }
            let l = match div {
                Some(dv) => {
                    let v = g.value(*dv);
                    if v.cols() != d {
                        return Err(Error::shape(
                            "encode_visual",
                            format!("diversity prompt is {:?}, token dim must be {}", v.shape(), d),
                        ));
                    }
                    parts.push(*dv);
                    v.rows()
                }
                None => 0,
            };
            parts.push(tokens);
            let layout = TokenSequence {
                deep: p,
                diversity: l,
                patches: n_patches,
            };
            seqs.push(start..start + layout.len());
            start += layout.len();
        }
        let mut x = g.concat(&parts, Axis::Rows)?;
        debug_assert_eq!(g.value(x).rows(), start);

        let cls_rows = vec![0usize; seqs.len()];
        for l in 0..layers {
            if l > 0 {
                if let Some((p, groups)) = &per_layer {
                    let mut parts = Vec::with_capacity(3 * seqs.len());
                    for rows in &seqs {
                        parts.push(g.slice_rows(x, rows.start..rows.start + 1)?);
                        parts.push(groups[l]);
                        parts.push(g.slice_rows(x, rows.start + 1 + p..rows.end)?);
                    }
                    x = g.concat(&parts, Axis::Rows)?;
                }
            }
            let readout = (l + 1 == layers).then_some(cls_rows.as_slice());
            x = block(g, bw, &format!("visual.layers.{l}"), x, &seqs, readout)?;
        }
        let x = bw.affine_norm(g, x, "visual.ln_final")?;
        let proj = bw.node(g, "visual.proj")?;
        g.matmul(x, proj)
    }
}

/// Single-image convenience wrapper; returns a `[1, d]` row.
pub fn encode_visual(
    image: &Image,
    diversity_prompt: Option<&Tensor>,
    deep_prompts: Option<&Tensor>,
    weights: &EncoderWeights,
) -> Result<Tensor> {
    let tokens = tokenize_image(image, weights)?;
    let mut g = Graph::new();
    let mut bw = BoundWeights::new(weights);
    let t = g.input(tokens);
    let div = diversity_prompt.map(|p| g.input(p.clone()));
    let deep = deep_prompts.map(|p| g.input(p.clone()));
    let batch = VisualBatch {
        patch_tokens: vec![t],
        diversity: vec![div],
    };
    let out = batch.encode(&mut g, &mut bw, deep)?;
    Ok(g.value(out).clone())
}

/// Encodes several texts; returns `[n, d]`, unnormalised.
pub fn encode_text_batch<S: AsRef<str>>(texts: &[S], weights: &EncoderWeights) -> Result<Tensor> {
    let cfg = weights.config();
    if texts.is_empty() {
        return Err(Error::invalid("no texts to encode"));
    }
    let table = weights.get("text.token_embed")?;
    let pos = weights.get("text.pos_embed")?;
    let mut g = Graph::new();
    let mut bw = BoundWeights::new(weights);
    let mut parts = Vec::with_capacity(texts.len());
    let mut seqs = Vec::with_capacity(texts.len());
    let mut last = Vec::with_capacity(texts.len());
    let mut start = 0;
    for text in texts {
        let ids = text_token_ids(text.as_ref(), cfg)?;
        let mut emb = Tensor::zeros(ids.len(), cfg.embed_dim);
        for (r, &id) in ids.iter().enumerate() {
            let trow = table.row_slice(id);
            let prow = pos.row_slice(r);
            for (c, v) in emb.row_slice_mut(r).iter_mut().enumerate() {
                *v = trow[c] + prow[c];
            }
        }
        parts.push(g.input(emb));
        seqs.push(start..start + ids.len());
        last.push(ids.len() - 1);
        start += ids.len();
    }
    let mut x = g.concat(&parts, Axis::Rows)?;
    for l in 0..cfg.layers {
        let readout = (l + 1 == cfg.layers).then_some(last.as_slice());
        x = block(&mut g, &mut bw, &format!("text.layers.{l}"), x, &seqs, readout)?;
    }
    let x = bw.affine_norm(&mut g, x, "text.ln_final")?;
    let proj = bw.node(&mut g, "text.proj")?;
    let out = g.matmul(x, proj)?;
    Ok(g.value(out).clone())
}

pub fn encode_text(text: &str, weights: &EncoderWeights) -> Result<Tensor> {
    encode_text_batch(&[text], weights)
}
