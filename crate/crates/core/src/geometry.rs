//! Boxes, positional queries and their codecs, IoU and GIoU.
//!
//! A positional query `(x, y, z, r)` describes a box centered at `(x, y)`
//! with width `2^(z - r)` and height `2^(z + r)`, so `z` is half the log2 of
//! the area and `r` half the log2 of the height/width ratio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use stmixer_tensor::{Tensor, Var};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous input-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0.0) * h.max(0.0)
    }

    fn hull(&self, other: &BBox) -> f64 {
        (self.x2.max(other.x2) - self.x1.min(other.x1))
            * (self.y2.max(other.y2) - self.y1.min(other.y1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalQuery {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl PositionalQuery {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn width(&self) -> f64 {
        (self.z - self.r).exp2()
    }

    pub fn height(&self) -> f64 {
        (self.z + self.r).exp2()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.r]
    }
}

pub fn pquery_to_box(q: &PositionalQuery) -> BBox {
    let (hw, hh) = (q.width() / 2.0, q.height() / 2.0);
    BBox::new(q.x - hw, q.y - hh, q.x + hw, q.y + hh)
}

pub fn box_to_pquery(b: &BBox) -> Result<PositionalQuery> {
    let (w, h) = (b.width(), b.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Geometry(format!("degenerate box {b:?}")));
    }
    let (x, y) = b.center();
    Ok(PositionalQuery::new(x, y, 0.5 * (w * h).log2(), 0.5 * (h / w).log2()))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU minus the fraction of the enclosing hull not covered by the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b);
    inter / union - (hull - union) / hull
}

/// Spatial, temporal and positional queries of one decoder state.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub spatial: Tensor,
    pub temporal: Tensor,
    pub positional: Vec<PositionalQuery>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.positional.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positional.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.positional.iter().map(pquery_to_box).collect()
    }
}

/// The positional query covering a whole `width x height` frame.
pub fn full_frame_query(width: usize, height: usize) -> PositionalQuery {
    box_to_pquery(&BBox::new(0.0, 0.0, width as f64, height as f64))
        .expect("frame has positive extent")
}

pub const CONTENT_INIT_STD: f64 = 0.02;

/// `n` queries of width `d`: content drawn from `N(0, CONTENT_INIT_STD²)`,
/// every positional query covering the whole frame.
pub fn init_queries(n: usize, d: usize, frame: (usize, usize), seed: u64) -> Result<QuerySet> {
    if n == 0 || d == 0 {
        return Err(Error::config("query count and width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, CONTENT_INIT_STD).expect("valid std");
    let spatial = Tensor::from_fn([n, d], |_| normal.sample(&mut rng));
    let temporal = Tensor::from_fn([n, d], |_| normal.sample(&mut rng));
    Ok(QuerySet {
        spatial,
        temporal,
        positional: vec![full_frame_query(frame.0, frame.1); n],
    })
}

pub fn pqueries_to_tensor(qs: &[PositionalQuery]) -> Tensor {
    let data = qs.iter().flat_map(|q| q.to_array()).collect();
    Tensor::new([qs.len(), 4], data).expect("4 values per query")
}

pub fn tensor_to_pqueries(t: &Tensor) -> Vec<PositionalQuery> {
    t.data()
        .chunks(4)
        .map(|c| PositionalQuery::new(c[0], c[1], c[2], c[3]))
        .collect()
}

/// Differentiable `[N, 4]` positional queries to `[N, 4]` corner boxes.
pub fn boxes_from_pqueries<'t>(qp: Var<'t>) -> Result<Var<'t>> {
    let v = qp.value();
    if v.rank() != 2 || v.shape()[1] != 4 {
        return Err(Error::Geometry(format!(
            "positional queries must be [N, 4], got {:?}",
            v.shape()
        )));
    }
    let n = v.shape()[0];
    let mut out = Vec::with_capacity(4 * n);
    let mut half = Vec::with_capacity(2 * n);
    for q in v.data().chunks(4) {
        let hw = (q[2] - q[3]).exp2() / 2.0;
        let hh = (q[2] + q[3]).exp2() / 2.0;
        out.extend_from_slice(&[q[0] - hw, q[1] - hh, q[0] + hw, q[1] + hh]);
        half.push((hw, hh));
    }
    let out = Tensor::new([n, 4], out)?;
    Ok(qp.tape().record(
        &[qp],
        out,
        Box::new(move |g| {
            let ln2 = std::f64::consts::LN_2;
            let mut gq = vec![0.0; 4 * n];
            for (i, &(hw, hh)) in half.iter().enumerate() {
                let gb = &g[4 * i..4 * i + 4];
                // d(hw)/dz = hw ln2, d(hw)/dr = -hw ln2; d(hh)/dz = d(hh)/dr = hh ln2
                let g_hw = gb[2] - gb[0];
                let g_hh = gb[3] - gb[1];
                gq[4 * i] = gb[0] + gb[2];
                gq[4 * i + 1] = gb[1] + gb[3];
                gq[4 * i + 2] = (g_hw * hw + g_hh * hh) * ln2;
                gq[4 * i + 3] = (-g_hw * hw + g_hh * hh) * ln2;
            }
            vec![gq]
        }),
    ))
}

/// Applies `[N, 4]` deltas `(dx, dy, dz, dr)` to `[N, 4]` positional
/// queries: `x += dx·w`, `y += dy·h`, `z += dz`, `r += dr`, with `w`, `h`
/// the width and height before the update.
pub fn apply_box_deltas<'t>(qp: Var<'t>, deltas: Var<'t>) -> Result<Var<'t>> {
    let (q, d) = (qp.value(), deltas.value());
    if q.rank() != 2 || q.shape()[1] != 4 || q.shape() != d.shape() {
        return Err(Error::Geometry(format!(
            "box deltas {:?} do not match queries {:?}",
            d.shape(),
            q.shape()
        )));
    }
    let n = q.shape()[0];
    let mut out = Vec::with_capacity(4 * n);
    let mut wh = Vec::with_capacity(n);
    for (qi, di) in q.data().chunks(4).zip(d.data().chunks(4)) {
        let w = (qi[2] - qi[3]).exp2();
        let h = (qi[2] + qi[3]).exp2();
        out.extend_from_slice(&[qi[0] + di[0] * w, qi[1] + di[1] * h, qi[2] + di[2], qi[3] + di[3]]);
        wh.push((w, h));
    }
    let dd = d.clone();
    Ok(qp.tape().record(
        &[qp, deltas],
        Tensor::new([n, 4], out)?,
        Box::new(move |g| {
            let ln2 = std::f64::consts::LN_2;
            let mut gq = vec![0.0; 4 * n];
            let mut gd = vec![0.0; 4 * n];
            for (i, &(w, h)) in wh.iter().enumerate() {
                let gi = &g[4 * i..4 * i + 4];
                let di = &dd.data()[4 * i..4 * i + 4];
                let gw = gi[0] * di[0] * w * ln2;
                let gh = gi[1] * di[1] * h * ln2;
                gq[4 * i] = gi[0];
                gq[4 * i + 1] = gi[1];
                gq[4 * i + 2] = gi[2] + gw + gh;
                gq[4 * i + 3] = gi[3] - gw + gh;
                gd[4 * i] = gi[0] * w;
                gd[4 * i + 1] = gi[1] * h;
                gd[4 * i + 2] = gi[2];
                gd[4 * i + 3] = gi[3];
            }
            vec![gq, gd]
        }),
    ))
}
