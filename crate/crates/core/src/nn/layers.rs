use crate::autodiff::{Float, Tape, Tensor, Var, SELU_ALPHA, SELU_LAMBDA};
use crate::error::Result;
use crate::rng::Stream;

use super::params::{lecun_normal, uniform_fan_in, Bound, ParamId, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode, the dropout stream, and buffer updates produced
/// during a training forward (batch-norm running statistics).
pub struct Ctx<T> {
    pub mode: Mode,
    noise: Option<Stream>,
    pub updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Float> Ctx<T> {
    pub fn eval() -> Self {
        Ctx {
            mode: Mode::Eval,
            noise: None,
            updates: Vec::new(),
        }
    }

    pub fn train(noise: Stream) -> Self {
        Ctx {
            mode: Mode::Train,
            noise: Some(noise),
            updates: Vec::new(),
        }
    }

    /// Training-mode context without a noise source; dropout layers then act
    /// as the identity. Used by gradient checks.
    pub fn train_deterministic() -> Self {
        Ctx {
            mode: Mode::Train,
            noise: None,
            updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn into_noise(self) -> Option<Stream> {
        self.noise
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    UniformFanIn,
    LecunNormal,
    Zeros,
}

/// Affine map `x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        params: &mut Params<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        s: &mut Stream,
    ) -> Self {
        let (w, b) = match init {
            Init::UniformFanIn => (
                uniform_fan_in(&[in_dim, out_dim], in_dim, s),
                uniform_fan_in(&[out_dim], in_dim, s),
            ),
            Init::LecunNormal => (lecun_normal(&[in_dim, out_dim], in_dim, s), Tensor::zeros(&[out_dim])),
            Init::Zeros => (Tensor::zeros(&[in_dim, out_dim]), Tensor::zeros(&[out_dim])),
        };
        Linear {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.weight))?;
        tape.add(h, p.var(self.bias))
    }
}

/// Inverted dropout; identity outside training or at `p == 0`.
pub fn dropout<T: Float>(tape: &mut Tape<T>, x: Var, p: f64, ctx: &mut Ctx<T>) -> Result<Var> {
    if !ctx.training() || p <= 0.0 {
        return Ok(x);
    }
    let Some(s) = ctx.noise.as_mut() else { return Ok(x) };
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 - p;
    let scale = T::of(1.0 / keep);
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if s.uniform() < keep { scale } else { T::zero() })
        .collect();
    let m = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, m)
}

/// Alpha dropout for SELU networks: dropped units are set to the negative
/// saturation value and an affine correction keeps mean and variance.
pub fn alpha_dropout<T: Float>(tape: &mut Tape<T>, x: Var, p: f64, ctx: &mut Ctx<T>) -> Result<Var> {
    if !ctx.training() || p <= 0.0 {
        return Ok(x);
    }
    let Some(s) = ctx.noise.as_mut() else { return Ok(x) };
    let alpha_p = -SELU_LAMBDA * SELU_ALPHA;
    let keep = 1.0 - p;
    let a = 1.0 / (keep * (1.0 + p * alpha_p * alpha_p)).sqrt();
    let b = -a * alpha_p * p;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut mul = Vec::with_capacity(n);
    let mut add = Vec::with_capacity(n);
    for _ in 0..n {
        if s.uniform() < keep {
            mul.push(T::of(a));
            add.push(T::of(b));
        } else {
            mul.push(T::zero());
            add.push(T::of(a * alpha_p + b));
        }
    }
    let m = tape.constant(Tensor::new(&shape, mul)?);
    let c = tape.constant(Tensor::new(&shape, add)?);
    let y = tape.mul(x, m)?;
    tape.add(y, c)
}

/// Normalises over the last axis, then applies gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(params: &mut Params<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let last = tape.shape(x).len() - 1;
        let mu = tape.mean(x, Some(last))?;
        let xc = tape.sub(x, mu)?;
        let sq = tape.mul(xc, xc)?;
        let var = tape.mean(sq, Some(last))?;
        let var = tape.add_scalar(var, 1e-5);
        let inv = tape.powf(var, -0.5)?;
        let y = tape.mul(xc, inv)?;
        let y = tape.mul(y, p.var(self.gain))?;
        tape.add(y, p.var(self.bias))
    }
}

/// Batch normalisation over rows of a `[N, d]` input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Float>(params: &mut Params<T>, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: params.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: params.add_buffer(format!("{name}.running_var"), Tensor::ones(&[dim])),
            momentum: 0.1,
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, ctx: &mut Ctx<T>) -> Result<Var> {
        let eps = 1e-5;
        let n = tape.shape(x)[0];
        let normed = if ctx.training() && n > 1 {
            let mu = tape.mean(x, Some(0))?;
            let xc = tape.sub(x, mu)?;
            let sq = tape.mul(xc, xc)?;
            let var = tape.mean(sq, Some(0))?;

            let m = self.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            let old_mean = tape.value(p.var(self.running_mean)).clone();
            let old_var = tape.value(p.var(self.running_var)).clone();
            let new_mean = blend(&old_mean, tape.value(mu).data(), m, 1.0);
            let new_var = blend(&old_var, tape.value(var).data(), m, unbias);
            ctx.updates.push((self.running_mean, new_mean));
            ctx.updates.push((self.running_var, new_var));

            let var = tape.add_scalar(var, eps);
            let inv = tape.powf(var, -0.5)?;
            tape.mul(xc, inv)?
        } else {
            let mu = p.var(self.running_mean);
            let var = tape.value(p.var(self.running_var)).map(|v| T::one() / (v + T::of(eps)).sqrt());
            let inv = tape.constant(var);
            let xc = tape.sub(x, mu)?;
            tape.mul(xc, inv)?
        };
        let y = tape.mul(normed, p.var(self.gamma))?;
        tape.add(y, p.var(self.beta))
    }
}

fn blend<T: Float>(old: &Tensor<T>, batch: &[T], momentum: f64, scale: f64) -> Tensor<T> {
    let data = old
        .data()
        .iter()
        .zip(batch)
        .map(|(&o, &b)| T::of((1.0 - momentum) * o.f64() + momentum * scale * b.f64()))
        .collect();
    Tensor::new(old.shape(), data).expect("same shape")
}
