//! Video convolutions on `[C, T, H, W]` tensors.
//!
//! Temporal stride is fixed to 1 and the temporal axis is zero-padded by
//! `kt / 2` on each side, so `T` is preserved for odd temporal kernels.

use crate::error::{shape_err, Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<'t> Var<'t> {
    /// 3D convolution. `self`: `[c_in, t, h, w]`; `weight`: `[c_out, c_in, kt, kh, kw]`
    /// with odd `kt`; `bias`: `[c_out]`.
    pub fn conv3d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        geom: Conv3dGeometry,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] {
            return shape_err("conv3d", &xs, &ws);
        }
        if ![1, 2, 4].contains(&geom.stride) {
            return Err(TensorError::Geometry {
                op: "conv3d",
                msg: format!("spatial stride {} not in {{1, 2, 4}}", geom.stride),
            });
        }
        self.conv3d_impl(weight, bias, geom)
    }

    fn conv3d_impl(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        geom: Conv3dGeometry,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        let (cin, t, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        if kt % 2 == 0 {
            return Err(TensorError::Geometry {
                op: "conv3d",
                msg: format!("temporal kernel {kt} must be odd"),
            });
        }
        let (s, p) = (geom.stride, geom.padding);
        let (Some(oh), Some(ow)) = (out_extent(h, kh, s, p), out_extent(wd, kw, s, p)) else {
            return Err(TensorError::Geometry {
                op: "conv3d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {p})"),
            });
        };
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [cout] {
                    return shape_err("conv3d", &ws, bv.shape());
                }
                Some(bv)
            }
            None => None,
        };
        let pt = kt / 2;
        let mut out = vec![0.0; cout * t * oh * ow];
        // Visits every (output, input, weight) index triple that contributes.
        let visit = move |f: &mut dyn FnMut(usize, usize, usize)| {
            for co in 0..cout {
                for ci in 0..cin {
                    for dt in 0..kt {
                        for ot in 0..t {
                            let it = ot + dt;
                            if it < pt || it - pt >= t {
                                continue;
                            }
                            let it = it - pt;
                            for ky in 0..kh {
                                for oy in 0..oh {
                                    let iy = oy * s + ky;
                                    if iy < p || iy - p >= h {
                                        continue;
                                    }
                                    let iy = iy - p;
                                    for kx in 0..kw {
                                        let wi = (((co * cin + ci) * kt + dt) * kh + ky) * kw + kx;
                                        for ox in 0..ow {
                                            let ix = ox * s + kx;
                                            if ix < p || ix - p >= wd {
                                                continue;
                                            }
                                            let ix = ix - p;
                                            let xi = ((ci * t + it) * h + iy) * wd + ix;
                                            let oi = ((co * t + ot) * oh + oy) * ow + ox;
                                            f(oi, xi, wi);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        {
            let (xd, wdat) = (x.data(), w.data());
            visit(&mut |oi, xi, wi| out[oi] += xd[xi] * wdat[wi]);
        }
        if let Some(bv) = &bv {
            for co in 0..cout {
                out[co * t * oh * ow..(co + 1) * t * oh * ow]
                    .iter_mut()
                    .for_each(|v| *v += bv.data()[co]);
            }
        }
        let out = Tensor::from_parts(vec![cout, t, oh, ow], out);
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let plane = t * oh * ow;
        Ok(self.tape().record(
            &inputs,
            out,
            Box::new(move |g| {
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let (xd, wdat) = (x.data(), w.data());
                visit(&mut |oi, xi, wi| {
                    gx[xi] += g[oi] * wdat[wi];
                    gw[wi] += g[oi] * xd[xi];
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push((0..cout).map(|co| g[co * plane..(co + 1) * plane].iter().sum()).collect());
                }
                grads
            }),
        ))
    }

    /// Transposed convolution with temporal kernel 1 and no padding.
    /// `self`: `[c_in, t, h, w]`; `weight`: `[c_in, c_out, 1, kh, kw]`.
    /// Output extent is `(h - 1) * stride + kh`.
    pub fn conv_transpose3d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 4 || ws.len() != 5 || ws[0] != xs[0] || ws[2] != 1 {
            return shape_err("conv_transpose3d", &xs, &ws);
        }
        if stride == 0 {
            return Err(TensorError::Geometry {
                op: "conv_transpose3d",
                msg: "stride must be positive".into(),
            });
        }
        let (cin, t, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[3], ws[4]);
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [cout] {
                    return shape_err("conv_transpose3d", &ws, bv.shape());
                }
                Some(bv)
            }
            None => None,
        };
        let visit = move |f: &mut dyn FnMut(usize, usize, usize)| {
            for ci in 0..cin {
                for co in 0..cout {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wi = ((ci * cout + co) * kh + ky) * kw + kx;
                            for it in 0..t {
                                for iy in 0..h {
                                    let oy = iy * stride + ky;
                                    for ix in 0..wd {
                                        let ox = ix * stride + kx;
                                        let xi = ((ci * t + it) * h + iy) * wd + ix;
                                        let oi = ((co * t + it) * oh + oy) * ow + ox;
                                        f(oi, xi, wi);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        let mut out = vec![0.0; cout * t * oh * ow];
        {
            let (xd, wdat) = (x.data(), w.data());
            visit(&mut |oi, xi, wi| out[oi] += xd[xi] * wdat[wi]);
        }
        let plane = t * oh * ow;
        if let Some(bv) = &bv {
            for co in 0..cout {
                out[co * plane..(co + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv.data()[co]);
            }
        }
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape().record(
            &inputs,
            Tensor::from_parts(vec![cout, t, oh, ow], out),
            Box::new(move |g| {
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let (xd, wdat) = (x.data(), w.data());
                visit(&mut |oi, xi, wi| {
                    gx[xi] += g[oi] * wdat[wi];
                    gw[wi] += g[oi] * xd[xi];
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push((0..cout).map(|co| g[co * plane..(co + 1) * plane].iter().sum()).collect());
                }
                grads
            }),
        ))
    }

    /// Nearest-neighbor spatial upsampling of `[c, t, h, w]` by an integer
    /// factor: target `(y, x)` reads source `(y / factor, x / factor)`.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 || factor == 0 {
            return shape_err("upsample_nearest", &xs, &[factor]);
        }
        let (c, t, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut src = Vec::with_capacity(c * t * oh * ow);
        for ct in 0..c * t {
            for y in 0..oh {
                for xx in 0..ow {
                    src.push((ct * h + y / factor) * w + xx / factor);
                }
            }
        }
        let data = src.iter().map(|&i| x.data()[i]).collect();
        let n = x.len();
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(vec![c, t, oh, ow], data),
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (o, &i) in src.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![gx]
            }),
        ))
    }
}
