use crate::error::{shape_err, Result, TensorError};
use crate::tape::Var;
use crate::tensor::{numel, strides, Tensor};

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::Axis { op, axis, rank });
    }
    Ok(())
}

/// `(outer, size, inner)` split of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if numel(shape) != x.len() {
            return shape_err("reshape", x.shape(), shape);
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        Ok(self
            .tape()
            .record(&[self], out, Box::new(|g| vec![g.to_vec()])))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return shape_err("permute", &shape, axes);
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        // gather index: position in input for each output element
        let n = x.len();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            src.push(idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum::<usize>());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let data = src.iter().map(|&s| x.data()[s]).collect();
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(out_shape, data),
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (o, &s) in src.iter().enumerate() {
                    gx[s] += g[o];
                }
                vec![gx]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let rank = self.shape().len();
        check_axis("transpose", a.max(b), rank)?;
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        check_axis("concat", axis, first.len())?;
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", &first, s);
            }
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        Ok(parts[0].tape().record(
            parts,
            Tensor::from_parts(out_shape, data),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> =
                    sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &s) in grads.iter_mut().zip(&sizes) {
                        gp.extend_from_slice(&g[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(TensorError::Geometry {
                op: "narrow",
                msg: format!("range {start}..{} exceeds axis size {}", start + len, shape[axis]),
            });
        }
        let (outer, size, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let n = x.len();
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(out_shape, data),
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = o * size * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![gx]
            }),
        ))
    }

    /// Gathers entries of axis 0; indices may repeat.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return shape_err("index_select", &shape, &[]);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::Geometry {
                op: "index_select",
                msg: format!("index {bad} out of range for axis of size {}", shape[0]),
            });
        }
        let row = x.len() / shape[0].max(1);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        let n = x.len();
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(out_shape, data),
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                        .for_each(|(a, b)| *a += b);
                }
                vec![gx]
            }),
        ))
    }

    /// Tiles the whole tensor `n` times along a new leading axis.
    pub fn repeat_leading(self, n: usize) -> Var<'t> {
        let x = self.value();
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(n * x.len());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let len = x.len();
        self.tape().record(
            &[self],
            Tensor::from_parts(shape, data),
            Box::new(move |g| {
                let mut gx = vec![0.0; len];
                for chunk in g.chunks(len.max(1)) {
                    gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![gx]
            }),
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let n = x.len();
        self.tape().record(
            &[self],
            Tensor::scalar(x.data().iter().sum()),
            Box::new(move |g| vec![vec![g[0]; n]]),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums out `axis`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis("sum_axis", axis, shape.len())?;
        let (outer, size, inner) = split_at_axis(&shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..size {
                let src = &x.data()[(o * size + s) * inner..(o * size + s + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(out_shape, data),
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * size * inner];
                for o in 0..outer {
                    for s in 0..size {
                        gx[(o * size + s) * inner..(o * size + s + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Averages out `axis`.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("mean_axis", axis, shape.len())?;
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_axis" });
        }
        Ok(self.sum_axis(axis)?.scale(1.0 / shape[axis] as f64))
    }
}
