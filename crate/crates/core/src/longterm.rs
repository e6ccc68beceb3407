//! Long-term query bank and the classifier that attends to it.
//!
//! A frozen short-term model stores, per clip, the concatenated spatial and
//! temporal queries of its `k` most human-like predictions. For clip `t`
//! the classifier stacks the bank entries of clips `t − w/2 .. t + w/2 − 1`
//! (missing clips become masked zero rows), cross-attends to them from the
//! current queries and classifies `[S_t, S_t']`.

use stmixer_tensor::{Tensor, Var};

use crate::decoder::{human_probs, ActionClassifier, StageOutput};
use crate::error::{Error, Result};
use crate::nn::{Ffn, LayerNorm, MultiHeadAttention};
use crate::params::{Binding, Init, ParamId};

/// Stored query rows per video and clip.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank {
    pub k: usize,
    /// Row width, twice the decoder width.
    pub dim: usize,
    /// `videos[v][t]` is `[k, dim]`.
    pub videos: Vec<Vec<Tensor>>,
}

impl QueryBank {
    pub fn new(k: usize, dim: usize) -> Self {
        Self {
            k,
            dim,
            videos: Vec::new(),
        }
    }

    /// `[w·k, dim]` rows for clip `t` of `video` and the row validity mask.
    pub fn window(&self, video: usize, t: usize, w: usize) -> Result<(Tensor, Vec<bool>)> {
        if w < 2 || w % 2 != 0 {
            return Err(Error::config(format!("window length {w} must be even and at least 2")));
        }
        let clips = self
            .videos
            .get(video)
            .ok_or_else(|| Error::config(format!("bank has no video {video}")))?;
        let (k, d) = (self.k, self.dim);
        let mut data = vec![0.0; w * k * d];
        let mut valid = vec![false; w * k];
        for slot in 0..w {
            let clip = t as i64 - (w / 2) as i64 + slot as i64;
            if clip < 0 || clip as usize >= clips.len() {
                continue;
            }
            data[slot * k * d..(slot + 1) * k * d].copy_from_slice(clips[clip as usize].data());
            valid[slot * k..(slot + 1) * k].iter_mut().for_each(|v| *v = true);
        }
        Ok((Tensor::new([w * k, d], data)?, valid))
    }
}

/// Rows `concat(Q_s', Q_t')` of the `k` highest human probabilities, in
/// descending order; ties keep the lower query index first.
pub fn top_k_rows(stage: &StageOutput<'_>, k: usize) -> Result<Tensor> {
    let probs = human_probs(&stage.human_logits.value());
    if k == 0 || k > probs.len() {
        return Err(Error::config(format!("cannot keep {k} of {} queries", probs.len())));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let (qs, qt) = (stage.state.spatial.value(), stage.state.temporal.value());
    let d = qs.shape()[1];
    let mut data = Vec::with_capacity(k * 2 * d);
    for &i in &order[..k] {
        data.extend_from_slice(&qs.data()[i * d..(i + 1) * d]);
        data.extend_from_slice(&qt.data()[i * d..(i + 1) * d]);
    }
    Ok(Tensor::new([k, 2 * d], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LongTermConfig {
    /// Row width `2D`.
    pub dim: usize,
    pub k: usize,
    pub window: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Adds a learned embedding per window slot to the bank rows.
    pub slot_embedding: bool,
}

#[derive(Clone, Debug)]
struct CrossLayer {
    attn: MultiHeadAttention,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct LongTermHead {
    pub cfg: LongTermConfig,
    slots: Option<ParamId>,
    layers: Vec<CrossLayer>,
    ffn: Ffn,
}

/// Output of the long-term head with its attention weights per layer.
pub struct LongTermOutput<'t> {
    pub logits: Var<'t>,
    /// `[heads, N, K]` per layer; empty when the window was fully masked.
    pub weights: Vec<Var<'t>>,
    pub fully_masked: bool,
}

impl LongTermHead {
    pub fn new(init: &mut Init<'_>, cfg: LongTermConfig) -> Result<Self> {
        if cfg.window < 2 || cfg.window % 2 != 0 {
            return Err(Error::config(format!(
                "window length {} must be even and at least 2",
                cfg.window
            )));
        }
        if cfg.k == 0 || cfg.layers == 0 {
            return Err(Error::config("long-term head needs k ≥ 1 and at least one layer"));
        }
        let mut s = init.sub("longterm");
        let slots = cfg
            .slot_embedding
            .then(|| s.normal("slots", &[cfg.window, cfg.dim], 0.02));
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut l = s.sub(&format!("layer{i}"));
                Ok(CrossLayer {
                    attn: MultiHeadAttention::new(&mut l, "attn", cfg.dim, cfg.heads)?,
                    norm: LayerNorm::new(&mut l, "norm", cfg.dim),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            slots,
            layers,
            ffn: Ffn::new(&mut s, "ffn", 2 * cfg.dim, cfg.hidden, cfg.classes),
        })
    }

    /// `s [N, 2D]` against a `[w·k, 2D]` window.
    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        s: Var<'t>,
        window: Var<'t>,
        valid: &[bool],
    ) -> Result<LongTermOutput<'t>> {
        let (w, k, d) = (self.cfg.window, self.cfg.k, self.cfg.dim);
        if window.shape() != [w * k, d] || valid.len() != w * k || s.shape().get(1) != Some(&d) {
            return Err(Error::config(format!(
                "window {:?} / queries {:?} do not match k = {k}, w = {w}, d = {d}",
                window.shape(),
                s.shape()
            )));
        }
        let fully_masked = !valid.iter().any(|&v| v);
        let mut weights = Vec::new();
        let s_long = if fully_masked {
            s.tape().constant(Tensor::zeros(s.shape()))
        } else {
            let memory = match self.slots {
                Some(id) => {
                    // row r belongs to slot r / k
                    let idx: Vec<usize> = (0..w * k).map(|r| r / k).collect();
                    window.add(p.get(id).index_select(&idx)?)?
                }
                None => window,
            };
            let mut x = s;
            for layer in &self.layers {
                let (out, att) = layer.attn.forward(p, x, memory, Some(valid))?;
                x = layer.norm.forward(p, x.add(out)?)?;
                weights.push(att);
            }
            x
        };
        let logits = self.ffn.forward(p, Var::concat(&[s, s_long], 1)?)?;
        Ok(LongTermOutput {
            logits,
            weights,
            fully_masked,
        })
    }
}

/// The long-term head bound to one clip's window.
pub struct LongTermContext<'a> {
    pub head: &'a LongTermHead,
    /// `[w·k, 2D]` bank rows.
    pub window: Tensor,
    pub valid: Vec<bool>,
}

impl LongTermContext<'_> {
    pub fn fully_masked(&self) -> bool {
        !self.valid.iter().any(|&v| v)
    }
}

impl ActionClassifier for LongTermContext<'_> {
    fn classify<'t>(&self, p: &Binding<'t>, spatial: Var<'t>, temporal: Var<'t>) -> Result<Var<'t>> {
        let window = spatial.tape().constant(self.window.clone());
        let s = Var::concat(&[spatial, temporal], 1)?;
        Ok(self.head.forward(p, s, window, &self.valid)?.logits)
    }
}
