//! Query-guided sampling from the 4D feature space.
//!
//! Each spatial query regresses `G × P` offsets `(Δx, Δy, Δz)`. Spatial
//! offsets are in units of the query box's width and height, so
//! `x̃ = x + Δx·2^(z−r)`, `ỹ = y + Δy·2^(z+r)`, `z̃ = z + Δz`. Points are
//! shared by all frames (copy) or follow a per-frame shift of the box
//! center (move). Values are read by trilinear interpolation on the
//! stride-4 grid, with pixel `x` at grid position `x / 4 − 0.5` and scale
//! `z̃` clamped to `[2, 5]`.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use stmixer_tensor::{Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::featspace::{FeatureSpace4D, GRID_STRIDE, Z_MAX, Z_MIN};
use crate::geometry::{pquery_to_box, PositionalQuery};
use crate::nn::Linear;
use crate::params::{Binding, Init};

/// Radius of the disk holding the initial offsets, in box widths/heights.
pub const SPREAD_RADIUS: f64 = 0.5;
/// Initial scale offset. Full-frame boxes sit above the top slab, where
/// the clamp passes no gradient to `Δz`; starting one and a half levels
/// finer keeps the first samples inside the slab range.
pub const INITIAL_DZ: f64 = -1.5;
/// Side of the fixed sampling lattice.
pub const GRID_SIDE: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Offsets regressed from the spatial query.
    Adaptive,
    /// A `7 × 7` lattice of cell centers inside the box, at the box's scale.
    FixedGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemporalMode {
    Copy,
    Move,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "fixed_grid" => Ok(Self::FixedGrid),
            _ => Err(Error::config(format!("unknown sampling mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adaptive => "adaptive",
            Self::FixedGrid => "fixed_grid",
        })
    }
}

impl std::str::FromStr for TemporalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "move" => Ok(Self::Move),
            _ => Err(Error::config(format!("unknown temporal mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for TemporalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Move => "move",
        })
    }
}

/// How keyframe points are carried to the other frames.
#[derive(Clone, Copy, Debug)]
pub enum Propagation<'t> {
    Copy,
    /// `[N, T, 2]` center shifts `(δx, δy)` in box widths/heights.
    Move(Var<'t>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub groups: usize,
    /// Adaptive points per group and frame; the fixed grid always uses 49.
    pub points: usize,
    pub frames: usize,
    pub mode: SamplingMode,
    pub temporal: TemporalMode,
}

impl SamplerConfig {
    /// Points actually sampled per group and frame.
    pub fn points_per_frame(&self) -> usize {
        match self.mode {
            SamplingMode::Adaptive => self.points,
            SamplingMode::FixedGrid => GRID_SIDE * GRID_SIDE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sampler {
    pub cfg: SamplerConfig,
    offsets: Linear,
    frame_shift: Option<Linear>,
}

impl Sampler {
    /// Offset head with zero weights and a spread-out bias; the optional
    /// per-frame shift head starts at zero, so move mode starts as copy.
    pub fn new(init: &mut Init<'_>, dim: usize, cfg: SamplerConfig) -> Result<Self> {
        if cfg.groups == 0 || dim % cfg.groups != 0 || cfg.points == 0 || cfg.frames == 0 {
            return Err(Error::config(format!(
                "sampler needs positive points/frames and {dim} divisible by {} groups",
                cfg.groups
            )));
        }
        let mut s = init.sub("sampler");
        let (g, p) = (cfg.groups, cfg.points);
        let offsets = {
            let mut o = s.sub("offsets");
            let weight = o.zeros("weight", &[dim, g * p * 3]);
            let bias = o.tensor("bias", spread_offsets(g, p).reshape([g * p * 3])?);
            Linear {
                weight,
                bias,
                in_dim: dim,
                out_dim: g * p * 3,
            }
        };
        let frame_shift = (cfg.temporal == TemporalMode::Move)
            .then(|| Linear::with_normal(&mut s, "frame_shift", dim, cfg.frames * 2, 0.0, 0.0));
        Ok(Self {
            cfg,
            offsets,
            frame_shift,
        })
    }

    /// `[N, D]` queries to `[N, G, P, 3]` offsets.
    pub fn regress_offsets<'t>(&self, p: &Binding<'t>, qs: Var<'t>) -> Result<Var<'t>> {
        let n = qs.shape()[0];
        self.offsets
            .forward(p, qs)?
            .reshape(&[n, self.cfg.groups, self.cfg.points, 3])
            .map_err(Into::into)
    }

    /// Sampling points `[N, G, T, P, 3]` in pixel coordinates and scale.
    pub fn points<'t>(&self, p: &Binding<'t>, qs: Var<'t>, qp: Var<'t>) -> Result<Var<'t>> {
        let n = qs.shape()[0];
        let offsets = match self.cfg.mode {
            SamplingMode::Adaptive => self.regress_offsets(p, qs)?,
            SamplingMode::FixedGrid => {
                let grid = fixed_grid_offsets(self.cfg.groups);
                let shape = [n, self.cfg.groups, GRID_SIDE * GRID_SIDE, 3];
                qs.tape()
                    .constant(Tensor::from_fn(shape, |i| grid.data()[i % grid.len()]))
            }
        };
        let propagation = match &self.frame_shift {
            Some(head) => Propagation::Move(head.forward(p, qs)?.reshape(&[n, self.cfg.frames, 2])?),
            None => Propagation::Copy,
        };
        decode_points(qp, offsets, self.cfg.frames, propagation)
    }
}

/// Bias of the offset head: each group's points follow a sunflower spiral
/// over the disk of radius [`SPREAD_RADIUS`], point `i` at radius
/// `R·sqrt((i + ½)/P)` and angle `i·golden + 2πg/G`, with `Δz` at
/// [`INITIAL_DZ`].
/// Every group thus sees both the centre and the rim of the box.
pub fn spread_offsets(groups: usize, points: usize) -> Tensor {
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut data = Vec::with_capacity(groups * points * 3);
    for g in 0..groups {
        for i in 0..points {
            let r = SPREAD_RADIUS * ((i as f64 + 0.5) / points as f64).sqrt();
            let theta = i as f64 * golden + 2.0 * PI * g as f64 / groups as f64;
            data.extend_from_slice(&[r * theta.cos(), r * theta.sin(), INITIAL_DZ]);
        }
    }
    Tensor::new([groups, points, 3], data).expect("sized above")
}

/// `[G, 49, 3]` offsets of the fixed lattice: cell centers
/// `(i + 0.5)/7 − 0.5` in box units, `Δz = 0`, identical for all groups.
pub fn fixed_grid_offsets(groups: usize) -> Tensor {
    let side = GRID_SIDE as f64;
    let mut data = Vec::with_capacity(groups * GRID_SIDE * GRID_SIDE * 3);
    for _ in 0..groups {
        for j in 0..GRID_SIDE {
            for i in 0..GRID_SIDE {
                data.extend_from_slice(&[
                    (i as f64 + 0.5) / side - 0.5,
                    (j as f64 + 0.5) / side - 0.5,
                    0.0,
                ]);
            }
        }
    }
    Tensor::new([groups, GRID_SIDE * GRID_SIDE, 3], data).expect("sized above")
}

/// The 49 lattice points of one box, row-major, at the box's own scale.
pub fn fixed_grid_points(q: &PositionalQuery) -> Vec<[f64; 3]> {
    let b = pquery_to_box(q);
    let side = GRID_SIDE as f64;
    let mut pts = Vec::with_capacity(GRID_SIDE * GRID_SIDE);
    for j in 0..GRID_SIDE {
        for i in 0..GRID_SIDE {
            pts.push([
                b.x1 + (i as f64 + 0.5) / side * b.width(),
                b.y1 + (j as f64 + 0.5) / side * b.height(),
                q.z,
            ]);
        }
    }
    pts
}

/// Decodes `[N, G, P, 3]` offsets against `[N, 4]` positional queries into
/// `[N, G, T, P, 3]` points. In move mode frame `t` uses the center
/// `(x + δx_t·w, y + δy_t·h)`.
pub fn decode_points<'t>(
    qp: Var<'t>,
    offsets: Var<'t>,
    frames: usize,
    propagation: Propagation<'t>,
) -> Result<Var<'t>> {
    let (q, o) = (qp.value(), offsets.value());
    let os = o.shape().to_vec();
    if q.rank() != 2 || q.shape()[1] != 4 || os.len() != 4 || os[0] != q.shape()[0] || os[3] != 3 {
        return Err(Error::Geometry(format!(
            "offsets {os:?} do not match positional queries {:?}",
            q.shape()
        )));
    }
    let (n, g, p, t) = (os[0], os[1], os[2], frames);
    let shift = match propagation {
        Propagation::Copy => None,
        Propagation::Move(s) => {
            if s.shape() != [n, t, 2] {
                return Err(Error::Geometry(format!(
                    "frame shifts {:?}, expected [{n}, {t}, 2]",
                    s.shape()
                )));
            }
            Some(s)
        }
    };
    let sv = shift.map(|s| s.value());
    let shift_at = |ni: usize, ti: usize| -> (f64, f64) {
        sv.as_ref()
            .map(|s| (s.data()[(ni * t + ti) * 2], s.data()[(ni * t + ti) * 2 + 1]))
            .unwrap_or((0.0, 0.0))
    };
    let mut out = Vec::with_capacity(n * g * t * p * 3);
    let mut wh = Vec::with_capacity(n);
    for ni in 0..n {
        let qi = &q.data()[4 * ni..4 * ni + 4];
        let w = (qi[2] - qi[3]).exp2();
        let h = (qi[2] + qi[3]).exp2();
        wh.push((w, h));
        for gi in 0..g {
            for ti in 0..t {
                let (sx, sy) = shift_at(ni, ti);
                for pi in 0..p {
                    let d = &o.data()[((ni * g + gi) * p + pi) * 3..][..3];
                    out.extend_from_slice(&[
                        qi[0] + sx * w + d[0] * w,
                        qi[1] + sy * h + d[1] * h,
                        qi[2] + d[2],
                    ]);
                }
            }
        }
    }
    let out = Tensor::new([n, g, t, p, 3], out)?;
    let mut inputs = vec![qp, offsets];
    inputs.extend(shift);
    let (o, sv) = (o.clone(), sv.clone());
    Ok(qp.tape().record(
        &inputs,
        out,
        Box::new(move |grad| {
            let mut gq = vec![0.0; n * 4];
            let mut go = vec![0.0; n * g * p * 3];
            let mut gs = vec![0.0; n * t * 2];
            for ni in 0..n {
                let (w, h) = wh[ni];
                for gi in 0..g {
                    for ti in 0..t {
                        let (sx, sy) = sv
                            .as_ref()
                            .map(|s| (s.data()[(ni * t + ti) * 2], s.data()[(ni * t + ti) * 2 + 1]))
                            .unwrap_or((0.0, 0.0));
                        for pi in 0..p {
                            let gg = &grad[(((ni * g + gi) * t + ti) * p + pi) * 3..][..3];
                            let oi = ((ni * g + gi) * p + pi) * 3;
                            let d = &o.data()[oi..oi + 3];
                            // x̃ depends on z − r through w, ỹ on z + r through h
                            let ax = gg[0] * (sx + d[0]) * w * LN_2;
                            let ay = gg[1] * (sy + d[1]) * h * LN_2;
                            gq[4 * ni] += gg[0];
                            gq[4 * ni + 1] += gg[1];
                            gq[4 * ni + 2] += ax + ay + gg[2];
                            gq[4 * ni + 3] += ay - ax;
                            go[oi] += gg[0] * w;
                            go[oi + 1] += gg[1] * h;
                            go[oi + 2] += gg[2];
                            gs[(ni * t + ti) * 2] += gg[0] * w;
                            gs[(ni * t + ti) * 2 + 1] += gg[1] * h;
                        }
                    }
                }
            }
            let mut grads = vec![gq, go];
            if sv.is_some() {
                grads.push(gs);
            }
            grads
        }),
    ))
}

/// Continuous grid position of a pixel coordinate.
pub fn pixel_to_grid(x: f64) -> f64 {
    x / GRID_STRIDE - 0.5
}

/// Clamped scale to slab position in `[0, Z − 1]`.
pub fn scale_to_slab(z: f64) -> f64 {
    z.clamp(Z_MIN, Z_MAX) - Z_MIN
}

/// One interpolation corner: flat spatial offset, weight and the weight's
/// derivatives with respect to the grid coordinates `(gx, gy, gz)`.
struct Corner {
    index: usize,
    weight: f64,
    dweight: [f64; 3],
}

/// The in-bounds corners around `(gx, gy, gz)` in a `[Z, H, W]` slab
/// stack, enumerated `z`-major then `y` then `x`. Weights are `wz·wy·wx`.
fn corners(gx: f64, gy: f64, gz: f64, zs: usize, hs: usize, ws: usize) -> Vec<Corner> {
    let (x0, y0, z0) = (gx.floor(), gy.floor(), gz.floor());
    let (fx, fy, fz) = (gx - x0, gy - y0, gz - z0);
    let mut out = Vec::with_capacity(8);
    for dz in 0..2 {
        let zi = z0 as i64 + dz;
        let (wz, dwz) = if dz == 0 { (1.0 - fz, -1.0) } else { (fz, 1.0) };
        if zi < 0 || zi >= zs as i64 {
            continue;
        }
        for dy in 0..2 {
            let yi = y0 as i64 + dy;
            let (wy, dwy) = if dy == 0 { (1.0 - fy, -1.0) } else { (fy, 1.0) };
            if yi < 0 || yi >= hs as i64 {
                continue;
            }
            for dx in 0..2 {
                let xi = x0 as i64 + dx;
                let (wx, dwx) = if dx == 0 { (1.0 - fx, -1.0) } else { (fx, 1.0) };
                if xi < 0 || xi >= ws as i64 {
                    continue;
                }
                out.push(Corner {
                    index: (zi as usize * hs + yi as usize) * ws + xi as usize,
                    weight: wz * wy * wx,
                    dweight: [wz * wy * dwx, wz * dwy * wx, dwz * wy * wx],
                });
            }
        }
    }
    out
}

/// Reads `[N, G, T, P, D/G]` features at `[N, G, T, P, 3]` points; group `g`
/// reads channel block `g`, frame `t` reads frame `t` of the space.
/// Differentiable with respect to both the volume and the points.
pub fn sample<'t>(space: &FeatureSpace4D<'t>, points: Var<'t>) -> Result<Var<'t>> {
    let (d, t, zs, hs, ws) = space.dims();
    let pv = points.value();
    let ps = pv.shape().to_vec();
    if ps.len() != 5 || ps[2] != t || ps[4] != 3 || ps[1] == 0 || d % ps[1] != 0 {
        return Err(Error::Geometry(format!(
            "points {ps:?} incompatible with feature space [{d}, {t}, {zs}, {hs}, {ws}]"
        )));
    }
    if !pv.all_finite() {
        return Err(TensorError::NonFinite {
            name: "sampling points".into(),
        }
        .into());
    }
    let (n, g, p) = (ps[0], ps[1], ps[3]);
    let dg = d / g;
    let vol = space.volume.value();
    let plane = zs * hs * ws;
    let chan_stride = t * plane;
    let mut out = Vec::with_capacity(n * g * t * p * dg);
    let mut cache = Vec::with_capacity(n * g * t * p);
    for (k, pt) in pv.data().chunks(3).enumerate() {
        let gi = (k / (t * p)) % g;
        let ti = (k / p) % t;
        let cs = corners(pixel_to_grid(pt[0]), pixel_to_grid(pt[1]), scale_to_slab(pt[2]), zs, hs, ws);
        let base = gi * dg * chan_stride + ti * plane;
        for c in 0..dg {
            let mut acc = 0.0;
            for corner in &cs {
                acc += corner.weight * vol.data()[base + c * chan_stride + corner.index];
            }
            out.push(acc);
        }
        cache.push((base, cs));
    }
    let out = Tensor::new([n, g, t, p, dg], out)?;
    let zgrad: Vec<f64> = pv
        .data()
        .chunks(3)
        .map(|pt| if pt[2] > Z_MIN && pt[2] < Z_MAX { 1.0 } else { 0.0 })
        .collect();
    let volume_len = vol.len();
    Ok(points.tape().record(
        &[space.volume, points],
        out,
        Box::new(move |grad| {
            let mut gv = vec![0.0; volume_len];
            let mut gp = vec![0.0; n * g * t * p * 3];
            for (k, (base, cs)) in cache.iter().enumerate() {
                let go = &grad[k * dg..(k + 1) * dg];
                let mut dgrid = [0.0; 3];
                for corner in cs {
                    for (c, &gc) in go.iter().enumerate() {
                        let idx = base + c * chan_stride + corner.index;
                        gv[idx] += corner.weight * gc;
                        let v = vol.data()[idx] * gc;
                        dgrid[0] += corner.dweight[0] * v;
                        dgrid[1] += corner.dweight[1] * v;
                        dgrid[2] += corner.dweight[2] * v;
                    }
                }
                gp[3 * k] = dgrid[0] / GRID_STRIDE;
                gp[3 * k + 1] = dgrid[1] / GRID_STRIDE;
                gp[3 * k + 2] = dgrid[2] * zgrad[k];
            }
            vec![gv, gp]
        }),
    ))
}
