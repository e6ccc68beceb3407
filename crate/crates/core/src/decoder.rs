//! The stack of adaptive sampling and mixing modules, the prediction heads
//! and detection decoding.
//!
//! Each module runs self-attention separately on the spatial and temporal
//! queries, samples the feature space around each positional query, mixes
//! the samples into both query sets and finally regresses a box update
//! from the spatial queries. Heads are shared by all stages.

use stmixer_tensor::{Tensor, Var};

use crate::error::{Error, Result};
use crate::featspace::FeatureSpace4D;
use crate::geometry::{apply_box_deltas, full_frame_query, pqueries_to_tensor, pquery_to_box, BBox, PositionalQuery, CONTENT_INIT_STD};
use crate::mixer::{MixStrategy, Mixer, MixerConfig};
use crate::nn::{Ffn, LayerNorm, MultiHeadAttention};
use crate::params::{Binding, Init, ParamId};
use crate::sampler::{sample, Sampler, SamplerConfig, SamplingMode, TemporalMode};

/// Human probability above which a query becomes a detection.
pub const DEFAULT_THRESHOLD: f64 = 0.6;
/// Index of the human class in the two-way human head.
pub const HUMAN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub queries: usize,
    pub stages: usize,
    pub attention_heads: usize,
    pub groups: usize,
    pub points: usize,
    pub frames: usize,
    pub out_points: usize,
    pub out_frames: usize,
    pub sampling: SamplingMode,
    pub temporal: TemporalMode,
    pub strategy: MixStrategy,
    pub ffn_hidden: usize,
    pub classes: usize,
    /// `(width, height)` of the input frames.
    pub frame: (usize, usize),
}

/// Query state between modules. `positional` is `[N, 4]` rows `(x, y, z, r)`.
#[derive(Clone, Copy, Debug)]
pub struct QueryState<'t> {
    pub spatial: Var<'t>,
    pub temporal: Var<'t>,
    pub positional: Var<'t>,
}

/// Outputs of one module and the shared heads evaluated on them.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput<'t> {
    pub state: QueryState<'t>,
    /// `[N, G, T, P, 3]` sampling points used by this stage.
    pub points: Var<'t>,
    /// `[N, 2]`, column [`HUMAN`] is the human logit.
    pub human_logits: Var<'t>,
    /// `[N, C]` action logits.
    pub action_logits: Var<'t>,
}

/// Per-stage outputs in stage order.
pub type StageTrace<'t> = Vec<StageOutput<'t>>;

/// Maps final spatial and temporal queries to `[N, C]` action logits.
pub trait ActionClassifier {
    fn classify<'t>(&self, p: &Binding<'t>, spatial: Var<'t>, temporal: Var<'t>) -> Result<Var<'t>>;
}

/// Short-term action head: an FFN over `[Q_s, Q_t]`.
#[derive(Clone, Debug)]
pub struct ShortTermHead {
    pub ffn: Ffn,
}

impl ShortTermHead {
    pub fn new(init: &mut Init<'_>, dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            ffn: Ffn::new(init, "action_head", 2 * dim, hidden, classes),
        }
    }
}

impl ActionClassifier for ShortTermHead {
    fn classify<'t>(&self, p: &Binding<'t>, spatial: Var<'t>, temporal: Var<'t>) -> Result<Var<'t>> {
        self.ffn.forward(p, Var::concat(&[spatial, temporal], 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct AsamModule {
    attn_spatial: MultiHeadAttention,
    norm_spatial: LayerNorm,
    attn_temporal: MultiHeadAttention,
    norm_temporal: LayerNorm,
    pub sampler: Sampler,
    pub mixer: Mixer,
    position: Ffn,
}

impl AsamModule {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let mut s = init.sub(name);
        let sampler_cfg = SamplerConfig {
            groups: cfg.groups,
            points: cfg.points,
            frames: cfg.frames,
            mode: cfg.sampling,
            temporal: cfg.temporal,
        };
        let mixer_cfg = MixerConfig {
            dim: cfg.dim,
            groups: cfg.groups,
            points: sampler_cfg.points_per_frame(),
            frames: cfg.frames,
            out_points: cfg.out_points,
            out_frames: cfg.out_frames,
            strategy: cfg.strategy,
        };
        Ok(Self {
            attn_spatial: MultiHeadAttention::new(&mut s, "attn_spatial", cfg.dim, cfg.attention_heads)?,
            norm_spatial: LayerNorm::new(&mut s, "norm_spatial", cfg.dim),
            attn_temporal: MultiHeadAttention::new(&mut s, "attn_temporal", cfg.dim, cfg.attention_heads)?,
            norm_temporal: LayerNorm::new(&mut s, "norm_temporal", cfg.dim),
            sampler: Sampler::new(&mut s, cfg.dim, sampler_cfg)?,
            mixer: Mixer::new(&mut s, mixer_cfg)?,
            position: Ffn::zero_out(&mut s, "position", cfg.dim, cfg.ffn_hidden, 4),
        })
    }

    /// One module step; also returns the sampling points.
    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        state: QueryState<'t>,
        space: &FeatureSpace4D<'t>,
    ) -> Result<(QueryState<'t>, Var<'t>)> {
        let qs = state.spatial;
        let qs = self
            .norm_spatial
            .forward(p, qs.add(self.attn_spatial.forward(p, qs, qs, None)?.0)?)?;
        let qt = state.temporal;
        let qt = self
            .norm_temporal
            .forward(p, qt.add(self.attn_temporal.forward(p, qt, qt, None)?.0)?)?;
        let points = self.sampler.points(p, qs, state.positional)?;
        let features = sample(space, points)?;
        let (qs, qt) = self.mixer.forward(p, qs, qt, features)?;
        let deltas = self.position.forward(p, qs)?;
        let positional = apply_box_deltas(state.positional, deltas)?;
        Ok((
            QueryState {
                spatial: qs,
                temporal: qt,
                positional,
            },
            points,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    init_spatial: ParamId,
    init_temporal: ParamId,
    pub modules: Vec<AsamModule>,
    human_head: Ffn,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, cfg: DecoderConfig) -> Result<Self> {
        if cfg.stages == 0 || cfg.queries == 0 || cfg.dim == 0 || cfg.classes == 0 {
            return Err(Error::config("decoder needs at least one stage, query, channel and class"));
        }
        let mut s = init.sub("decoder");
        let init_spatial = s.normal("queries.spatial", &[cfg.queries, cfg.dim], CONTENT_INIT_STD);
        let init_temporal = s.normal("queries.temporal", &[cfg.queries, cfg.dim], CONTENT_INIT_STD);
        let modules = (0..cfg.stages)
            .map(|m| AsamModule::new(&mut s, &format!("stage{m}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let human_head = Ffn::new(&mut s, "human_head", cfg.dim, cfg.ffn_hidden, 2);
        Ok(Self {
            cfg,
            init_spatial,
            init_temporal,
            modules,
            human_head,
        })
    }

    /// Learned content queries and full-frame positional queries.
    pub fn initial_state<'t>(&self, p: &Binding<'t>) -> QueryState<'t> {
        let spatial = p.get(self.init_spatial);
        let q = full_frame_query(self.cfg.frame.0, self.cfg.frame.1);
        QueryState {
            spatial,
            temporal: p.get(self.init_temporal),
            positional: spatial
                .tape()
                .constant(pqueries_to_tensor(&vec![q; self.cfg.queries])),
        }
    }

    /// `[N, 2]` human/background logits.
    pub fn predict_human<'t>(&self, p: &Binding<'t>, spatial: Var<'t>) -> Result<Var<'t>> {
        self.human_head.forward(p, spatial)
    }

    /// Runs every module, evaluating the heads after each.
    pub fn stack_forward<'t>(
        &self,
        p: &Binding<'t>,
        space: &FeatureSpace4D<'t>,
        classifier: &dyn ActionClassifier,
    ) -> Result<StageTrace<'t>> {
        self.stack_from(p, space, self.initial_state(p), classifier)
    }

    /// Runs every module starting from `state`.
    pub fn stack_from<'t>(
        &self,
        p: &Binding<'t>,
        space: &FeatureSpace4D<'t>,
        mut state: QueryState<'t>,
        classifier: &dyn ActionClassifier,
    ) -> Result<StageTrace<'t>> {
        let mut trace = Vec::with_capacity(self.modules.len());
        for module in &self.modules {
            let (next, points) = module.forward(p, state, space)?;
            state = next;
            trace.push(StageOutput {
                state,
                points,
                human_logits: self.predict_human(p, state.spatial)?,
                action_logits: classifier.classify(p, state.spatial, state.temporal)?,
            });
        }
        Ok(trace)
    }
}

/// One detected actor.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub query: usize,
    pub bbox: BBox,
    pub human_prob: f64,
    pub action_scores: Vec<f64>,
}

/// Human probability per row of `[N, 2]` logits.
pub fn human_probs(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|l| {
            let m = l[0].max(l[1]);
            let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
            [a, b][HUMAN] / (a + b)
        })
        .collect()
}

/// Detections from one stage: queries whose human probability exceeds
/// `threshold`, with boxes decoded from the positional queries. No NMS.
pub fn detections(stage: &StageOutput<'_>, threshold: f64) -> Vec<Detection> {
    let probs = human_probs(&stage.human_logits.value());
    let qp = stage.state.positional.value();
    let actions = stage.action_logits.value();
    let c = actions.shape()[1];
    probs
        .iter()
        .enumerate()
        .filter(|(_, &h)| h > threshold)
        .map(|(i, &h)| {
            let q = &qp.data()[4 * i..4 * i + 4];
            Detection {
                query: i,
                bbox: pquery_to_box(&PositionalQuery::new(q[0], q[1], q[2], q[3])),
                human_prob: h,
                action_scores: actions.data()[i * c..(i + 1) * c]
                    .iter()
                    .map(|&x| stmixer_tensor::sigmoid(x))
                    .collect(),
            }
        })
        .collect()
}
