use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `out[m,n] += a[m,k] · b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            orow.iter_mut().zip(grow).for_each(|(o, &gv)| *o += av * gv);
        }
    }
}

impl<'t> Var<'t> {
    /// `[..., k] × [k, n] → [..., n]`; leading axes of `self` are flattened
    /// into the row dimension.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return shape_err("matmul", &ash, &bsh);
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = a.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        let mut oshape = ash.clone();
        *oshape.last_mut().unwrap() = n;
        Ok(self.tape().record(
            &[self, other],
            Tensor::from_parts(oshape, out),
            Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                gemm_nt(g, b.data(), &mut ga, m, k, n);
                gemm_tn(a.data(), g, &mut gb, m, k, n);
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return shape_err("bmm", &ash, &bsh);
        }
        let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.tape().record(
            &[self, other],
            Tensor::from_parts(vec![batch, m, n], out),
            Box::new(move |g| {
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    gemm_nt(
                        gs,
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                    gemm_tn(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        gs,
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map `self × weight + bias` over the last axis.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }
}
