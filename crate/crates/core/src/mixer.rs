//! Query-conditioned dual-branch mixing of sampled features.
//!
//! Each branch pools the sampled features (over frames for the spatial
//! branch, over points for the temporal one), then per query and group
//! applies a channel mix `ReLU(LN(F·M_c))` followed by a point mix
//! `ReLU(LN(Fᵀ·M_p))`. `M_c` and `M_p` are produced by a linear generator
//! from the branch's own query. The mixed groups are flattened, projected
//! to `D`, added to the query and normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stmixer_tensor::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Binding, Init, ParamId};

/// Standard deviation of the generator weights.
pub const GENERATOR_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixStrategy {
    Dual,
    SpatialOnly,
    TemporalOnly,
    /// Both branches with query-independent learned `M_c`, `M_p`.
    FixedParams,
}

impl std::str::FromStr for MixStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Self::Dual),
            "spatial_only" => Ok(Self::SpatialOnly),
            "temporal_only" => Ok(Self::TemporalOnly),
            "fixed_params" => Ok(Self::FixedParams),
            _ => Err(Error::config(format!("unknown mixing strategy `{s}`"))),
        }
    }
}

impl std::fmt::Display for MixStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dual => "dual",
            Self::SpatialOnly => "spatial_only",
            Self::TemporalOnly => "temporal_only",
            Self::FixedParams => "fixed_params",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixerConfig {
    pub dim: usize,
    pub groups: usize,
    /// Sampled points per frame.
    pub points: usize,
    pub frames: usize,
    pub out_points: usize,
    pub out_frames: usize,
    pub strategy: MixStrategy,
}

/// One mixing branch over `[N·G, P, D/G]` pooled features.
#[derive(Clone, Debug)]
pub struct Branch {
    gen_weight: Option<ParamId>,
    gen_bias: ParamId,
    channel_norm: LayerNorm,
    point_norm: LayerNorm,
    out: Linear,
    norm: LayerNorm,
    dim: usize,
    groups: usize,
    points: usize,
    out_points: usize,
}

impl Branch {
    /// `adaptive = false` builds a generator without weights, so `M_c` and
    /// `M_p` are the learned bias alone.
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        groups: usize,
        points: usize,
        out_points: usize,
        adaptive: bool,
    ) -> Self {
        let dg = dim / groups;
        let mut s = init.sub(name);
        let gen_len = groups * (dg * dg + points * out_points);
        let gen_weight = adaptive.then(|| s.normal("generator.weight", &[dim, gen_len], GENERATOR_STD));
        // M_c starts at the identity, M_p at Glorot-uniform values
        let bound = (6.0 / (points + out_points) as f64).sqrt();
        let mut bias = Vec::with_capacity(gen_len);
        for _ in 0..groups {
            bias.extend((0..dg * dg).map(|i| if i / dg == i % dg { 1.0 } else { 0.0 }));
        }
        let rng = s.rng();
        bias.extend((0..groups * points * out_points).map(|_| rng.random_range(-bound..=bound)));
        let gen_bias = s.tensor("generator.bias", Tensor::new([gen_len], bias).expect("sized above"));
        Self {
            gen_weight,
            gen_bias,
            channel_norm: LayerNorm::new(&mut s, "channel_norm", dg),
            point_norm: LayerNorm::new(&mut s, "point_norm", out_points),
            out: Linear::new(&mut s, "out", groups * dg * out_points, dim),
            norm: LayerNorm::new(&mut s, "norm", dim),
            dim,
            groups,
            points,
            out_points,
        }
    }

    /// Generated `(M_c [N·G, dg, dg], M_p [N·G, P, P_out])` for `[N, D]` queries.
    pub fn generate<'t>(&self, p: &Binding<'t>, query: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = query.shape()[0];
        let (g, dg) = (self.groups, self.dim / self.groups);
        let params = match self.gen_weight {
            Some(w) => query.linear(p.get(w), Some(p.get(self.gen_bias)))?,
            None => p.get(self.gen_bias).repeat_leading(n),
        };
        let mc = params.narrow(1, 0, g * dg * dg)?.reshape(&[n * g, dg, dg])?;
        let mp = params
            .narrow(1, g * dg * dg, g * self.points * self.out_points)?
            .reshape(&[n * g, self.points, self.out_points])?;
        Ok((mc, mp))
    }

    /// The pre-residual update `[N, D]` for `query [N, D]` and pooled
    /// features `[N·G, P, dg]`.
    pub fn update<'t>(&self, p: &Binding<'t>, query: Var<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        let n = query.shape()[0];
        let dg = self.dim / self.groups;
        if pooled.shape() != [n * self.groups, self.points, dg] {
            return Err(Error::Geometry(format!(
                "pooled features {:?}, expected [{}, {}, {dg}]",
                pooled.shape(),
                n * self.groups,
                self.points
            )));
        }
        let (mc, mp) = self.generate(p, query)?;
        let cm = self.channel_norm.forward(p, pooled.bmm(mc)?)?.relu();
        let pcm = self
            .point_norm
            .forward(p, cm.transpose(1, 2)?.bmm(mp)?)?
            .relu();
        let flat = pcm.reshape(&[n, self.groups * dg * self.out_points])?;
        self.out.forward(p, flat)
    }

    /// `LN(query + update)`.
    pub fn forward<'t>(&self, p: &Binding<'t>, query: Var<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        let update = self.update(p, query, pooled)?;
        self.norm.forward(p, query.add(update)?)
    }
}

#[derive(Clone, Debug)]
pub struct Mixer {
    pub cfg: MixerConfig,
    spatial: Option<Branch>,
    temporal: Option<Branch>,
}

impl Mixer {
    pub fn new(init: &mut Init<'_>, cfg: MixerConfig) -> Result<Self> {
        if cfg.groups == 0 || cfg.dim % cfg.groups != 0 {
            return Err(Error::config(format!(
                "mixer width {} not divisible by {} groups",
                cfg.dim, cfg.groups
            )));
        }
        if [cfg.points, cfg.frames, cfg.out_points, cfg.out_frames].contains(&0) {
            return Err(Error::config("mixer point counts must be positive"));
        }
        let mut s = init.sub("mixer");
        let adaptive = cfg.strategy != MixStrategy::FixedParams;
        let spatial = (cfg.strategy != MixStrategy::TemporalOnly).then(|| {
            Branch::new(&mut s, "spatial", cfg.dim, cfg.groups, cfg.points, cfg.out_points, adaptive)
        });
        let temporal = (cfg.strategy != MixStrategy::SpatialOnly).then(|| {
            Branch::new(&mut s, "temporal", cfg.dim, cfg.groups, cfg.frames, cfg.out_frames, adaptive)
        });
        Ok(Self {
            cfg,
            spatial,
            temporal,
        })
    }

    /// Mixes `[N, G, T, P, D/G]` features into updated `(Q_s, Q_t)`. A
    /// disabled branch returns its query unchanged.
    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        qs: Var<'t>,
        qt: Var<'t>,
        features: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = qs.shape()[0];
        let (g, t, pts, dg) = (self.cfg.groups, self.cfg.frames, self.cfg.points, self.cfg.dim / self.cfg.groups);
        if features.shape() != [n, g, t, pts, dg] {
            return Err(Error::Geometry(format!(
                "sampled features {:?}, expected [{n}, {g}, {t}, {pts}, {dg}]",
                features.shape()
            )));
        }
        let qs2 = match &self.spatial {
            Some(b) => {
                let pooled = features.mean_axis(2)?.reshape(&[n * g, pts, dg])?;
                b.forward(p, qs, pooled)?
            }
            None => qs,
        };
        let qt2 = match &self.temporal {
            Some(b) => {
                let pooled = features.mean_axis(3)?.reshape(&[n * g, t, dg])?;
                b.forward(p, qt, pooled)?
            }
            None => qt,
        };
        Ok((qs2, qt2))
    }
}
