//! The full detector: backbone, 4D feature space, decoder and action head.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;
use stmixer_tensor::{Tape, Tensor};

use crate::backbone::Backbone;
use crate::config::{Phase, TrainConfig};
use crate::decoder::{detections, human_probs, ActionClassifier, Decoder, Detection, ShortTermHead, StageTrace};
use crate::error::{Error, Result};
use crate::eval::{frame_map, EvalReport, DEFAULT_IOU};
use crate::featspace::FeatureSpaceBuilder;
use crate::longterm::{top_k_rows, LongTermContext, LongTermHead, QueryBank};
use crate::params::{Binding, Init, ParamStore};
use crate::geometry::{pquery_to_box, tensor_to_pqueries};
use crate::synthdata::{ClipSample, CLASS_NAMES, NUM_CLASSES};

#[derive(Clone, Debug)]
enum Head {
    Short(ShortTermHead),
    Long(LongTermHead),
}

/// Long-term window rows for one clip and their validity mask.
pub type Window = (Tensor, Vec<bool>);

#[derive(Clone, Debug)]
pub struct StMixer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    backbone: Backbone,
    lateral: FeatureSpaceBuilder,
    pub decoder: Decoder,
    head: Head,
}

impl StMixer {
    /// Fresh parameters drawn from `cfg.seed`; the head follows `cfg.phase`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut init, m.backbone, 1, m.backbone_width, m.dim);
        let lateral = FeatureSpaceBuilder::new(&mut init, backbone.channels(), m.dim);
        let decoder = Decoder::new(&mut init, cfg.decoder())?;
        let head = match cfg.phase {
            Phase::Short => Head::Short(ShortTermHead::new(&mut init, m.dim, m.ffn_hidden, NUM_CLASSES)),
            Phase::Long => Head::Long(LongTermHead::new(&mut init, cfg.longterm())?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            lateral,
            decoder,
            head,
        })
    }

    pub fn phase(&self) -> Phase {
        match self.head {
            Head::Short(_) => Phase::Short,
            Head::Long(_) => Phase::Long,
        }
    }

    /// Runs the detector on a `[1, T, H, W]` clip. Long-term models need the
    /// clip's bank window.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Binding<'t>,
        video: &Tensor,
        window: Option<&Window>,
    ) -> Result<StageTrace<'t>> {
        let maps = self.backbone.forward(p, tape.constant(video.clone()))?;
        let space = self.lateral.build(p, &maps)?;
        match (&self.head, window) {
            (Head::Short(h), _) => self.decoder.stack_forward(p, &space, h as &dyn ActionClassifier),
            (Head::Long(h), Some((rows, valid))) => {
                let ctx = LongTermContext {
                    head: h,
                    window: rows.clone(),
                    valid: valid.clone(),
                };
                self.decoder.stack_forward(p, &space, &ctx)
            }
            (Head::Long(_), None) => Err(Error::config("long-term model needs a bank window")),
        }
    }

    /// Last-stage detections above the configured human threshold.
    pub fn infer(&self, video: &Tensor, window: Option<&Window>) -> Result<Vec<Detection>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let trace = self.forward(&tape, &p, video, window)?;
        let last = trace.last().ok_or_else(|| Error::config("model has no stages"))?;
        Ok(detections(last, self.cfg.threshold))
    }

    /// Bank of the top-`long_k` query rows for every clip, from this
    /// (short-term) model with frozen weights.
    pub fn build_bank(&self, videos: &[Vec<ClipSample>]) -> Result<QueryBank> {
        if self.phase() != Phase::Short {
            return Err(Error::config("the bank is built by a short-term model"));
        }
        let k = self.cfg.model.long_k;
        let mut bank = QueryBank::new(k, 2 * self.cfg.model.dim);
        for clips in videos {
            let rows = clips
                .iter()
                .map(|clip| {
                    let tape = Tape::new();
                    let p = self.store.bind_frozen(&tape);
                    let trace = self.forward(&tape, &p, &clip.video, None)?;
                    top_k_rows(trace.last().expect("at least one stage"), k)
                })
                .collect::<Result<Vec<_>>>()?;
            bank.videos.push(rows);
        }
        Ok(bank)
    }

    /// Window for clip `t` of `video`, or `None` for short-term models.
    pub fn window_for(&self, bank: Option<&QueryBank>, video: usize, t: usize) -> Result<Option<Window>> {
        match self.phase() {
            Phase::Short => Ok(None),
            Phase::Long => {
                let bank = bank.ok_or_else(|| Error::config("long-term model needs a query bank"))?;
                if bank.k != self.cfg.model.long_k || bank.dim != 2 * self.cfg.model.dim {
                    return Err(Error::config(format!(
                        "bank rows are {}x{}, model expects {}x{}",
                        bank.k,
                        bank.dim,
                        self.cfg.model.long_k,
                        2 * self.cfg.model.dim
                    )));
                }
                Ok(Some(bank.window(video, t, self.cfg.model.long_window)?))
            }
        }
    }

    /// Keyframe detections for every clip, grouped like `videos` and
    /// flattened in video-major order.
    pub fn detect_all(&self, videos: &[Vec<ClipSample>], bank: Option<&QueryBank>) -> Result<Vec<Vec<Detection>>> {
        let mut out = Vec::new();
        for (v, clips) in videos.iter().enumerate() {
            for (t, clip) in clips.iter().enumerate() {
                let window = self.window_for(bank, v, t)?;
                out.push(self.infer(&clip.video, window.as_ref())?);
            }
        }
        Ok(out)
    }

    /// Frame mAP at IoU 0.5 over every clip of `videos`.
    pub fn evaluate(&self, videos: &[Vec<ClipSample>], bank: Option<&QueryBank>) -> Result<EvalReport> {
        let dets = self.detect_all(videos, bank)?;
        let gts: Vec<_> = videos.iter().flatten().map(|c| c.gt.clone()).collect();
        Ok(frame_map(&dets, &gts, NUM_CLASSES, DEFAULT_IOU))
    }
}

/// Everything needed to redraw one stage: sampling points, boxes and scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageExport {
    pub stage: usize,
    /// `(x, y, z)` per query, group, frame and point, in input pixels.
    pub points: Vec<[f64; 3]>,
    /// `[groups, frames, points]` layout of each query's entries in `points`.
    pub layout: [usize; 3],
    pub boxes: Vec<[f64; 4]>,
    pub human_probs: Vec<f64>,
    /// Highest action scores per query, best first.
    pub top_actions: Vec<Vec<(String, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisExport {
    pub frame: (usize, usize),
    pub stages: Vec<StageExport>,
}

/// Number of action scores kept per query in a [`VisExport`].
pub const TOP_ACTIONS: usize = 3;

impl StMixer {
    pub fn visualize(&self, video: &Tensor, window: Option<&Window>) -> Result<VisExport> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let trace = self.forward(&tape, &p, video, window)?;
        let stages = trace
            .iter()
            .enumerate()
            .map(|(m, stage)| {
                let pts = stage.points.value();
                let shape = pts.shape();
                let qp = stage.state.positional.value();
                let actions = stage.action_logits.value();
                let c = actions.shape()[1];
                StageExport {
                    stage: m + 1,
                    points: pts.data().chunks(3).map(|v| [v[0], v[1], v[2]]).collect(),
                    layout: [shape[1], shape[2], shape[3]],
                    boxes: tensor_to_pqueries(&qp).iter().map(|q| pquery_to_box(q).to_array()).collect(),
                    human_probs: human_probs(&stage.human_logits.value()),
                    top_actions: actions
                        .data()
                        .chunks(c)
                        .map(|row| {
                            let mut idx: Vec<usize> = (0..c).collect();
                            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
                            idx.iter()
                                .take(TOP_ACTIONS)
                                .map(|&k| (CLASS_NAMES[k].to_string(), stmixer_tensor::sigmoid(row[k])))
                                .collect()
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(VisExport {
            frame: (self.cfg.data.width, self.cfg.data.height),
            stages,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::DatasetSpec;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.model.dim = 8;
        c.model.queries = 3;
        c.model.stages = 2;
        c.model.groups = 2;
        c.model.attention_heads = 2;
        c.model.points = 2;
        c.model.out_points = 4;
        c.model.out_frames = 4;
        c.model.ffn_hidden = 8;
        c.model.backbone_width = 4;
        c.model.long_k = 2;
        c.model.long_window = 2;
        c.model.long_heads = 2;
        c.model.long_layers = 1;
        c.data.frames = 2;
        c.data.height = 32;
        c.data.width = 32;
        c.data.min_size = 6.0;
        c.data.max_size = 10.0;
        c
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = StMixer::new(&tiny()).unwrap();
        let b = StMixer::new(&tiny()).unwrap();
        assert!(a.store.iter().zip(b.store.iter()).all(|(x, y)| x.value.bitwise_eq(&y.value)));
    }

    #[test]
    fn short_then_long_pipeline() {
        let cfg = tiny();
        let short = StMixer::new(&cfg).unwrap();
        let videos = DatasetSpec::long_videos(3, 1, 3, cfg.data.clone()).generate().unwrap();
        let bank = short.build_bank(&videos).unwrap();
        assert_eq!(bank.videos[0].len(), 3);
        assert_eq!(bank.videos[0][0].shape(), &[2, 16]);

        let mut long_cfg = cfg.clone();
        long_cfg.phase = Phase::Long;
        let long = StMixer::new(&long_cfg).unwrap();
        assert!(long.window_for(None, 0, 0).is_err());
        let w = long.window_for(Some(&bank), 0, 1).unwrap().unwrap();
        assert_eq!(w.0.shape(), &[4, 16]);
        let tape = Tape::new();
        let p = long.store.bind(&tape);
        let trace = long.forward(&tape, &p, &videos[0][1].video, Some(&w)).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[1].action_logits.shape(), &[3, NUM_CLASSES]);
        let vis = long.visualize(&videos[0][1].video, Some(&w)).unwrap();
        assert_eq!(vis.stages.len(), 2);
        assert_eq!(vis.stages[0].points.len(), 3 * 2 * 2 * 2);
        assert_eq!(vis.stages[0].points[0], {
            let d = trace[0].points.value();
            [d.data()[0], d.data()[1], d.data()[2]]
        });
        let report = long.evaluate(&videos, Some(&bank)).unwrap();
        assert!((0.0..=1.0).contains(&report.map));
    }
}
