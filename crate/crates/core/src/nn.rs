//! Small layers shared by the decoder, heads and long-term classifier.

use stmixer_tensor::{Var, LAYERNORM_EPS};

use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            weight: s.xavier("weight", &[in_dim, out_dim], in_dim, out_dim),
            bias: s.zeros("bias", &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// Weights and bias drawn from `N(0, std²)` and `N(0, bias_std²)`.
    pub fn with_normal(
        init: &mut Init<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        bias_std: f64,
    ) -> Self {
        let mut s = init.sub(name);
        let weight = if std > 0.0 {
            s.normal("weight", &[in_dim, out_dim], std)
        } else {
            s.zeros("weight", &[in_dim, out_dim])
        };
        let bias = if bias_std > 0.0 {
            s.normal("bias", &[out_dim], bias_std)
        } else {
            s.zeros("bias", &[out_dim])
        };
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(p.get(self.weight), Some(p.get(self.bias)))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            gain: s.ones("gain", &[dim]),
            bias: s.zeros("bias", &[dim]),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layernorm(p.get(self.gain), p.get(self.bias), LAYERNORM_EPS)?)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub hidden: Linear,
    pub out: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            hidden: Linear::new(&mut s, "fc1", in_dim, hidden),
            out: Linear::new(&mut s, "fc2", hidden, out_dim),
        }
    }

    /// Output layer initialized to zero, so the initial output is zero.
    pub fn zero_out(init: &mut Init<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            hidden: Linear::new(&mut s, "fc1", in_dim, hidden),
            out: Linear::with_normal(&mut s, "fc2", hidden, out_dim, 0.0, 0.0),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(p, x)?.relu();
        self.out.forward(p, h)
    }
}

/// Multi-head scaled dot-product attention composed from tape primitives.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        let mut s = init.sub(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", dim, dim),
            k: Linear::new(&mut s, "k", dim, dim),
            v: Linear::new(&mut s, "v", dim, dim),
            o: Linear::new(&mut s, "o", dim, dim),
            heads,
            dim,
        })
    }

    /// Attends `[Nq, d]` queries to `[Nk, d]` keys/values; `valid` masks keys.
    /// Returns the output `[Nq, d]` and the weights `[heads, Nq, Nk]`.
    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        query: Var<'t>,
        memory: Var<'t>,
        valid: Option<&[bool]>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (nq, nk) = (query.shape()[0], memory.shape()[0]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |x: Var<'t>, n: usize| -> Result<Var<'t>> {
            Ok(x.reshape(&[n, h, dh])?.permute(&[1, 0, 2])?)
        };
        let q = split(self.q.forward(p, query)?, nq)?;
        let k = split(self.k.forward(p, memory)?, nk)?;
        let v = split(self.v.forward(p, memory)?, nk)?;
        let scores = q.bmm(k.transpose(1, 2)?)?.scale(1.0 / (dh as f64).sqrt());
        let weights = scores.masked_softmax(valid)?;
        let ctx = weights.bmm(v)?.permute(&[1, 0, 2])?.reshape(&[nq, self.dim])?;
        Ok((self.o.forward(p, ctx)?, weights))
    }
}
