//! Unified 4D feature space: every pyramid level projected to `D` channels
//! and rescaled onto the stride-4 grid, stacked along a scale axis.

use stmixer_tensor::{Conv3dGeometry, Var};

use crate::backbone::PyramidMaps;
use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId};

/// Scale of slab 0.
pub const Z_MIN: f64 = 2.0;
/// Scale of the last slab.
pub const Z_MAX: f64 = 5.0;
/// Input pixels per cell of the common grid.
pub const GRID_STRIDE: f64 = 4.0;

/// `volume` is `[D, T, 4, H₂, W₂]`; slab `i` holds scale `z = i + 2`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSpace4D<'t> {
    pub volume: Var<'t>,
}

impl<'t> FeatureSpace4D<'t> {
    /// Wraps a `[D, T, Z, H, W]` volume.
    pub fn new(volume: Var<'t>) -> Result<Self> {
        if volume.shape().len() != 5 {
            return Err(Error::Geometry(format!(
                "feature space must be [D, T, Z, H, W], got {:?}",
                volume.shape()
            )));
        }
        Ok(Self { volume })
    }

    /// `(D, T, Z, H, W)`
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.volume.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }
}

/// Per-level 1×1×1 lateral projections.
#[derive(Clone, Debug)]
pub struct FeatureSpaceBuilder {
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    in_channels: Vec<usize>,
    pub dim: usize,
}

impl FeatureSpaceBuilder {
    pub fn new(init: &mut Init<'_>, in_channels: &[usize], dim: usize) -> Self {
        let mut s = init.sub("lateral");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            let mut l = s.sub(&format!("z{}", i + 2));
            weights.push(l.xavier("weight", &[dim, c, 1, 1, 1], c, dim));
            biases.push(l.zeros("bias", &[dim]));
        }
        Self {
            weights,
            biases,
            in_channels: in_channels.to_vec(),
            dim,
        }
    }

    pub fn build<'t>(&self, p: &Binding<'t>, maps: &PyramidMaps<'t>) -> Result<FeatureSpace4D<'t>> {
        if maps.channels() != self.in_channels {
            return Err(Error::config(format!(
                "lateral convolutions expect channels {:?}, pyramid has {:?}",
                self.in_channels,
                maps.channels()
            )));
        }
        build_space(
            maps,
            |i, x| Ok(x.conv3d(p.get(self.weights[i]), Some(p.get(self.biases[i])), Conv3dGeometry::new(1, 0))?),
        )
    }
}

/// Applies `lateral` per level, upsamples level `i` by `2^i` and stacks.
pub fn build_space<'t>(
    maps: &PyramidMaps<'t>,
    lateral: impl Fn(usize, Var<'t>) -> Result<Var<'t>>,
) -> Result<FeatureSpace4D<'t>> {
    let base = maps
        .maps
        .first()
        .ok_or_else(|| Error::config("empty pyramid"))?
        .shape();
    let mut slabs = Vec::with_capacity(maps.maps.len());
    for (i, &m) in maps.maps.iter().enumerate() {
        let x = lateral(i, m)?.upsample_nearest(1 << i)?;
        let s = x.shape();
        if s[2] != base[2] || s[3] != base[3] {
            return Err(Error::Geometry(format!(
                "level {} rescales to {}x{}, expected {}x{}",
                i + 2,
                s[3],
                s[2],
                base[3],
                base[2]
            )));
        }
        slabs.push(x.reshape(&[s[0], s[1], 1, s[2], s[3]])?);
    }
    FeatureSpace4D::new(Var::concat(&slabs, 2)?)
}
