//! Deterministic training loop with JSON-lines metrics.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stmixer_tensor::{Tape, Tensor, TensorError};

use crate::config::{Phase, TrainConfig};
use crate::error::{Error, Result};
use crate::longterm::QueryBank;
use crate::losses::{total_loss, StageBreakdown};
use crate::model::StMixer;
use crate::synthdata::{derive_seed, ClipSample};

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Per-stage terms, summed over the clips of the step.
    pub stages: Vec<StageBreakdown>,
    /// Train-set frame mAP, present every `eval_every` steps and at the end.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_map: Option<f64>,
}

pub struct TrainOutcome {
    pub model: StMixer,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Loss and parameter gradients of one clip.
pub fn clip_gradients(
    model: &StMixer,
    clip: &ClipSample,
    window: Option<&crate::model::Window>,
) -> Result<(f64, Vec<StageBreakdown>, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let trace = model.forward(&tape, &p, &clip.video, window)?;
    let frame = (model.cfg.data.width, model.cfg.data.height);
    let loss = total_loss(&trace, &clip.gt, frame, &model.cfg.loss)?;
    let value = loss.total.value().item();
    let breakdown = loss.breakdown();
    let mut grads = tape.backward(loss.total);
    Ok((value, breakdown, p.gradients(&mut grads)))
}

/// Mean loss over every clip, without updating anything.
pub fn mean_loss(model: &StMixer, videos: &[Vec<ClipSample>], bank: Option<&QueryBank>) -> Result<f64> {
    let frame = (model.cfg.data.width, model.cfg.data.height);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, clips) in videos.iter().enumerate() {
        for (t, clip) in clips.iter().enumerate() {
            let window = model.window_for(bank, v, t)?;
            let tape = Tape::new();
            let p = model.store.bind_frozen(&tape);
            let trace = model.forward(&tape, &p, &clip.video, window.as_ref())?;
            sum += total_loss(&trace, &clip.gt, frame, &model.cfg.loss)?.total.value().item();
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

fn add_breakdown(acc: &mut Vec<StageBreakdown>, b: Vec<StageBreakdown>) {
    if acc.is_empty() {
        *acc = b;
        return;
    }
    for (a, b) in acc.iter_mut().zip(b) {
        a.cls += b.cls;
        a.l1 += b.l1;
        a.giou += b.giou;
        a.act += b.act;
        a.total += b.total;
    }
}

/// Trains a fresh model on `videos`. Long-term training needs `bank`.
/// Each step draws `accumulate` clips from a seeded per-epoch shuffle,
/// averages their gradients, clips the global norm and applies AdamW.
pub fn train(
    cfg: &TrainConfig,
    videos: &[Vec<ClipSample>],
    bank: Option<&QueryBank>,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    resume(StMixer::new(cfg)?, cfg, videos, bank, metrics)
}

/// Continues training `model` for `cfg.steps` steps with fresh optimizer
/// moments. The model's architecture must match `cfg.model`.
pub fn resume(
    mut model: StMixer,
    cfg: &TrainConfig,
    videos: &[Vec<ClipSample>],
    bank: Option<&QueryBank>,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if model.cfg.model != cfg.model || model.cfg.phase != cfg.phase {
        return Err(Error::config("resumed model does not match the configured architecture"));
    }
    model.cfg = cfg.clone();
    if cfg.phase == Phase::Long && bank.is_none() {
        return Err(Error::config("long-term training needs a query bank"));
    }
    let items: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, clips)| (0..clips.len()).map(move |t| (v, t)))
        .collect();
    if items.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let windows = items
        .iter()
        .map(|&(v, t)| model.window_for(bank, v, t))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5EED));
    let mut order: Vec<usize> = Vec::new();
    let opt = cfg.optimizer();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut sum: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        let mut stages = Vec::new();
        for _ in 0..cfg.accumulate {
            if order.is_empty() {
                order = (0..items.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled above");
            let (v, t) = items[i];
            let (l, b, g) = clip_gradients(&model, &videos[v][t], windows[i].as_ref()).map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { name }) => Error::Numeric {
                    step,
                    detail: format!("non-finite `{name}` on video {v} clip {t}"),
                },
                other => other,
            })?;
            if !l.is_finite() {
                return Err(Error::Numeric {
                    step,
                    detail: format!("loss is {l} on video {v} clip {t}"),
                });
            }
            loss += l;
            add_breakdown(&mut stages, b);
            sum = Some(match sum {
                None => g,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                    }
                    acc
                }
            });
        }
        let mut grads = sum.expect("accumulate is positive");
        let scale = 1.0 / cfg.accumulate as f64;
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| (x * scale) * (x * scale))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric {
                step,
                detail: format!("gradient norm is {norm}"),
            });
        }
        let factor = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            scale * cfg.grad_clip / norm
        } else {
            scale
        };
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
        model.store.adamw_step(&grads, &opt).map_err(|e| Error::Numeric {
            step,
            detail: e.to_string(),
        })?;
        let last = step + 1 == cfg.steps;
        let train_map = if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || (last && cfg.eval_every > 0) {
            Some(model.evaluate(videos, bank)?.map)
        } else {
            None
        };
        let record = StepRecord {
            step,
            loss: loss * scale,
            grad_norm: norm,
            stages,
            train_map,
        };
        log::debug!("step {step} loss {:.5} grad {:.4}", record.loss, norm);
        if let Some(out) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        records.push(record);
    }
    Ok(TrainOutcome { model, records })
}
