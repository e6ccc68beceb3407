//! Toy learnable video backbones producing maps at downsampling rates
//! `2^z`, `z ∈ {2, 3, 4, 5}`.
//!
//! Temporal kernels have size 1 everywhere, so every map keeps the clip's
//! `T`; temporal reasoning is left to the decoder.

use serde::{Deserialize, Serialize};
use stmixer_tensor::{Conv3dGeometry, Var};

use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId};

pub const SCALES: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Stride-4 stem followed by three stride-2 stages.
    Hierarchical,
    /// Single stride-16 trunk with four resampling heads.
    Plain,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Self::Hierarchical),
            "plain" => Ok(Self::Plain),
            _ => Err(Error::config(format!("unknown backbone `{s}`"))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hierarchical => "hierarchical",
            Self::Plain => "plain",
        })
    }
}

/// Maps `X_z` for `z = 2..=5`, each `[C_z, T, H / 2^z, W / 2^z]`.
pub struct PyramidMaps<'t> {
    pub maps: Vec<Var<'t>>,
}

impl PyramidMaps<'_> {
    pub fn channels(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.shape()[0]).collect()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    geom: Conv3dGeometry,
}

impl ConvLayer {
    fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, k: usize, geom: Conv3dGeometry) -> Self {
        let mut s = init.sub(name);
        let fan_in = cin * k * k;
        Self {
            weight: s.uniform("weight", &[cout, cin, 1, k, k], (6.0 / fan_in as f64).sqrt()),
            bias: s.zeros("bias", &[cout]),
            geom,
        }
    }

    fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv3d(p.get(self.weight), Some(p.get(self.bias)), self.geom)?)
    }
}

#[derive(Clone, Debug)]
struct DeconvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

impl DeconvLayer {
    fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut s = init.sub(name);
        let fan_in = cin;
        Self {
            weight: s.uniform("weight", &[cin, cout, 1, stride, stride], (3.0 / fan_in as f64).sqrt()),
            bias: s.zeros("bias", &[cout]),
            stride,
        }
    }

    fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv_transpose3d(p.get(self.weight), Some(p.get(self.bias)), self.stride)?)
    }
}

#[derive(Clone, Debug)]
enum Layers {
    Hierarchical {
        stem: ConvLayer,
        stages: Vec<ConvLayer>,
    },
    Plain {
        trunk: Vec<ConvLayer>,
        up4: DeconvLayer,
        up2: DeconvLayer,
        same: ConvLayer,
        down2: ConvLayer,
    },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub in_channels: usize,
    layers: Layers,
    channels: Vec<usize>,
}

impl Backbone {
    /// `width` is the stem width for the hierarchical path (doubling per
    /// stage) and the trunk width for the plain path, whose heads emit
    /// `out_channels` each.
    pub fn new(
        init: &mut Init<'_>,
        kind: BackboneKind,
        in_channels: usize,
        width: usize,
        out_channels: usize,
    ) -> Self {
        let mut s = init.sub("backbone");
        match kind {
            BackboneKind::Hierarchical => {
                let stem = ConvLayer::new(&mut s, "stem", in_channels, width, 5, Conv3dGeometry::new(4, 2));
                let stages = (0..3)
                    .map(|i| {
                        ConvLayer::new(
                            &mut s,
                            &format!("stage{}", i + 3),
                            width << i,
                            width << (i + 1),
                            3,
                            Conv3dGeometry::new(2, 1),
                        )
                    })
                    .collect();
                Self {
                    kind,
                    in_channels,
                    layers: Layers::Hierarchical { stem, stages },
                    channels: (0..4).map(|i| width << i).collect(),
                }
            }
            BackboneKind::Plain => {
                let trunk = vec![
                    ConvLayer::new(&mut s, "trunk0", in_channels, width, 5, Conv3dGeometry::new(4, 2)),
                    ConvLayer::new(&mut s, "trunk1", width, width, 3, Conv3dGeometry::new(2, 1)),
                    ConvLayer::new(&mut s, "trunk2", width, width, 3, Conv3dGeometry::new(2, 1)),
                ];
                Self {
                    kind,
                    in_channels,
                    layers: Layers::Plain {
                        trunk,
                        up4: DeconvLayer::new(&mut s, "head2", width, out_channels, 4),
                        up2: DeconvLayer::new(&mut s, "head3", width, out_channels, 2),
                        same: ConvLayer::new(&mut s, "head4", width, out_channels, 1, Conv3dGeometry::new(1, 0)),
                        down2: ConvLayer::new(&mut s, "head5", width, out_channels, 3, Conv3dGeometry::new(2, 1)),
                    },
                    channels: vec![out_channels; 4],
                }
            }
        }
    }

    /// Channel count of each output level.
    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, video: Var<'t>) -> Result<PyramidMaps<'t>> {
        let shape = video.shape();
        if shape.len() != 4 || shape[0] != self.in_channels {
            return Err(Error::Geometry(format!(
                "backbone expects [{}, T, H, W] input, got {shape:?}",
                self.in_channels
            )));
        }
        if shape[2] % 32 != 0 || shape[3] % 32 != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Geometry(format!(
                "frame size {}x{} must be a positive multiple of 32",
                shape[3], shape[2]
            )));
        }
        let maps = match &self.layers {
            Layers::Hierarchical { stem, stages } => {
                let mut maps = vec![stem.forward(p, video)?.relu()];
                for stage in stages {
                    let x = stage.forward(p, *maps.last().unwrap())?.relu();
                    maps.push(x);
                }
                maps
            }
            Layers::Plain {
                trunk,
                up4,
                up2,
                same,
                down2,
            } => {
                let mut x = video;
                for layer in trunk {
                    x = layer.forward(p, x)?.relu();
                }
                vec![
                    up4.forward(p, x)?,
                    up2.forward(p, x)?,
                    same.forward(p, x)?,
                    down2.forward(p, x)?,
                ]
            }
        };
        Ok(PyramidMaps { maps })
    }
}
