use crate::error::{shape_err, Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

impl<'t> Var<'t> {
    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias` (both shape `[d]`).
    pub fn layernorm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "layernorm" });
        }
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [d] {
            return shape_err("layernorm", &shape, gv.shape());
        }
        if bv.shape() != [d] {
            return shape_err("layernorm", &shape, bv.shape());
        }
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.tape().record(
            &[self, gain, bias],
            Tensor::from_parts(shape, out),
            Box::new(move |g| {
                let mut gx = vec![0.0; rows * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let grow = &g[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                        gb[j] += grow[j];
                        gh[j] = grow[j] * gv.data()[j];
                        mean_gh += gh[j];
                        mean_ghh += gh[j] * hrow[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghh /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (gh[j] - mean_gh - hrow[j] * mean_ghh);
                    }
                }
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.masked_softmax(None)
    }

    /// Softmax over the last axis restricted to positions where `valid` is
    /// true; masked positions get exactly zero weight and zero gradient.
    pub fn masked_softmax(self, valid: Option<&[bool]>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mask: Vec<bool> = match valid {
            Some(m) if m.len() != d => return shape_err("masked_softmax", &shape, &[m.len()]),
            Some(m) => m.to_vec(),
            None => vec![true; d],
        };
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::Geometry {
                op: "masked_softmax",
                msg: "every position is masked".into(),
            });
        }
        let mut out = vec![0.0; x.len()];
        for (orow, row) in out.chunks_mut(d).zip(x.data().chunks(d)) {
            let max = row
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            orow.iter_mut().for_each(|v| *v /= z);
        }
        let y = out.clone();
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(shape, out),
            Box::new(move |g| {
                let mut gx = vec![0.0; y.len()];
                for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "log_softmax" });
        }
        let mut out = vec![0.0; x.len()];
        let mut probs = vec![0.0; x.len()];
        for ((orow, prow), row) in out.chunks_mut(d).zip(probs.chunks_mut(d)).zip(x.data().chunks(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..d {
                orow[j] = row[j] - lse;
                prow[j] = orow[j].exp();
            }
        }
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(shape, out),
            Box::new(move |g| {
                let mut gx = vec![0.0; probs.len()];
                for ((gxr, gr), pr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(probs.chunks(d)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        gxr[j] = gr[j] - pr[j] * s;
                    }
                }
                vec![gx]
            }),
        ))
    }
}
