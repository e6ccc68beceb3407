use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    fn map_unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let out = x.map(f);
        let y = std::rc::Rc::new(out.clone());
        self.tape().record(
            &[self],
            out,
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![gx]
            }),
        )
    }

    fn check_same(self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return shape_err(op, &a, &b);
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same(other, "add")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(|g| vec![g.to_vec(), g.to_vec()]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same(other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(|g| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same(other, "div")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, y)| g / y).collect();
                let gb = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.select_by(other, "minimum", |x, y| x <= y)
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.select_by(other, "maximum", |x, y| x >= y)
    }

    fn select_by(
        self,
        other: Var<'t>,
        op: &'static str,
        pick_self: fn(f64, f64) -> bool,
    ) -> Result<Var<'t>> {
        self.check_same(other, op)?;
        let (a, b) = (self.value(), other.value());
        let mask: Vec<bool> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| pick_self(x, y))
            .collect();
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .zip(&mask)
            .map(|((&x, &y), &m)| if m { x } else { y })
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(move |g| {
                let ga = g.iter().zip(&mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
                let gb = g.iter().zip(&mask).map(|(&g, &m)| if m { 0.0 } else { g }).collect();
                vec![ga, gb]
            }),
        ))
    }

    /// Adds `bias` (shape `[d]`) to every row of `self` (shape `[..., d]`).
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let d = *x.shape().last().unwrap_or(&0);
        if b.shape() != [d] {
            return shape_err("add_bias", x.shape(), b.shape());
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.tape().record(
            &[self, bias],
            out,
            Box::new(move |g| {
                let mut gb = vec![0.0; d];
                for row in g.chunks(d.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![g.to_vec(), gb]
            }),
        ))
    }

    /// Multiplies every row of `self` (shape `[..., d]`) by `scale` (shape `[d]`).
    pub fn mul_bias(self, scale: Var<'t>) -> Result<Var<'t>> {
        let (x, s) = (self.value(), scale.value());
        let d = *x.shape().last().unwrap_or(&0);
        if s.shape() != [d] {
            return shape_err("mul_bias", x.shape(), s.shape());
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            row.iter_mut().zip(s.data()).for_each(|(v, s)| *v *= s);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.tape().record(
            &[self, scale],
            out,
            Box::new(move |g| {
                let mut gx = g.to_vec();
                let mut gs = vec![0.0; d];
                for ((grow, xrow), gxrow) in g
                    .chunks(d.max(1))
                    .zip(x.data().chunks(d.max(1)))
                    .zip(gx.chunks_mut(d.max(1)))
                {
                    for j in 0..d {
                        gs[j] += grow[j] * xrow[j];
                        gxrow[j] = grow[j] * s.data()[j];
                    }
                }
                vec![gx, gs]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map_unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map_unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// ReLU with gradient 0 at the kink.
    pub fn relu(self) -> Var<'t> {
        self.map_unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Var<'t> {
        self.map_unary(f64::exp, |_, y| y)
    }

    /// `2^x`.
    pub fn exp2(self) -> Var<'t> {
        self.map_unary(f64::exp2, |_, y| y * std::f64::consts::LN_2)
    }

    pub fn ln(self) -> Var<'t> {
        self.map_unary(f64::ln, |x, _| 1.0 / x)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.map_unary(softplus, |x, _| sigmoid(x))
    }

    pub fn abs(self) -> Var<'t> {
        self.map_unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.map_unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map_unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
