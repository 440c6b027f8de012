//! Parameter store with seeded initialization, plus the small set of layers
//! the text encoder and denoiser are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Named trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter's value, keeping its identity for autodiff.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    fn insert(&mut self, name: String, value: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    Zeros,
    Ones,
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Normal(f64),
}

/// Hierarchical, seeded parameter initializer.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match kind {
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
            InitKind::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            InitKind::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(self.rng);
                    z * std
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.insert(full, t)
    }

    /// Registers a copy of an existing tensor under a new name.
    pub fn copy_of(&mut self, name: &str, source: &Tensor) -> Result<Tensor> {
        let full = format!("{}.{name}", self.prefix);
        self.store.insert(full, source.copy()?.detach())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = init.tensor("weight", &[out_dim, in_dim], InitKind::FanIn(in_dim))?;
        let b = if bias {
            Some(init.tensor("bias", &[out_dim], InitKind::FanIn(in_dim))?)
        } else {
            None
        };
        Ok(Self {
            inner: candle_nn::Linear::new(w, b),
        })
    }

    /// Output projection that starts as the zero map.
    pub fn zeros(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = init.tensor("weight", &[out_dim, in_dim], InitKind::Zeros)?;
        let b = init.tensor("bias", &[out_dim], InitKind::Zeros)?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = init.tensor(
            "weight",
            &[out_ch, in_ch, kernel, kernel],
            InitKind::FanIn(fan_in),
        )?;
        let bias = init.tensor("bias", &[out_ch], InitKind::FanIn(fan_in))?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }

    /// Same geometry as `source`, initialized from a copy of its weights.
    pub fn copy_from(init: &mut Init, source: &Conv2d) -> Result<Self> {
        Ok(Self {
            weight: init.copy_of("weight", &source.weight)?,
            bias: init.copy_of("bias", &source.bias)?,
            padding: source.padding,
            stride: source.stride,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(init: &mut Init, channels: usize, groups: usize) -> Result<Self> {
        let groups = gcd(groups, channels);
        let w = init.tensor("weight", &[channels], InitKind::Ones)?;
        let b = init.tensor("bias", &[channels], InitKind::Zeros)?;
        Ok(Self {
            inner: candle_nn::GroupNorm::new(w, b, channels, groups, 1e-5)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Layer norm over the last dimension, composed from primitive ops so it
/// differentiates in every dtype.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        let weight = init.tensor("weight", &[dim], InitKind::Ones)?;
        let bias = init.tensor("bias", &[dim], InitKind::Zeros)?;
        Ok(Self { weight, bias, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let centered = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Multi-head attention over `(batch, tokens, dim)` inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    /// `zero_out` zero-initializes the output projection so the residual
    /// branch starts at exactly zero.
    pub fn new(
        init: &mut Init,
        query_dim: usize,
        context_dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || query_dim % heads != 0 {
            return Err(Error::Invalid(format!(
                "dim {query_dim} not divisible by {heads} heads"
            )));
        }
        let to_q = Linear::new(&mut init.pp("to_q"), query_dim, query_dim, false)?;
        let to_k = Linear::new(&mut init.pp("to_k"), context_dim, query_dim, false)?;
        let to_v = Linear::new(&mut init.pp("to_v"), context_dim, query_dim, false)?;
        let to_out = if zero_out {
            Linear::zeros(&mut init.pp("to_out"), query_dim, query_dim)?
        } else {
            Linear::new(&mut init.pp("to_out"), query_dim, query_dim, true)?
        };
        Ok(Self {
            to_q,
            to_k,
            to_v,
            to_out,
            heads,
            head_dim: query_dim / heads,
        })
    }

    pub fn out_weight(&self) -> &Tensor {
        self.to_out.weight()
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x`: `(B, N, query_dim)`; `context`: `(B, M, context_dim)`, or `None`
    /// for self-attention.
    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let ctx = context.unwrap_or(x);
        let (b, n, c) = x.dims3()?;
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(ctx)?)?;
        let v = self.split_heads(&self.to_v.forward(ctx)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        self.to_out.forward(&out)
    }
}

/// Gated feed-forward (`GEGLU`, 4× expansion).
#[derive(Debug, Clone)]
pub struct FeedForward {
    proj_in: Linear,
    proj_out: Linear,
    hidden: usize,
}

impl FeedForward {
    pub fn new(init: &mut Init, dim: usize, zero_out: bool) -> Result<Self> {
        let hidden = 4 * dim;
        let proj_in = Linear::new(&mut init.pp("proj_in"), dim, 2 * hidden, true)?;
        let proj_out = if zero_out {
            Linear::zeros(&mut init.pp("proj_out"), hidden, dim)?
        } else {
            Linear::new(&mut init.pp("proj_out"), hidden, dim, true)?
        };
        Ok(Self {
            proj_in,
            proj_out,
            hidden,
        })
    }

    pub fn out_weight(&self) -> &Tensor {
        self.proj_out.weight()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.proj_in.forward(x)?;
        let value = h.narrow(D::Minus1, 0, self.hidden)?;
        let gate = h.narrow(D::Minus1, self.hidden, self.hidden)?;
        self.proj_out.forward(&(value * gate.gelu_erf()?)?)
    }
}

/// Sinusoidal embedding of integer timesteps: `(N,)` → `(N, dim)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut sin = Vec::with_capacity(half);
        let mut cos = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            sin.push(arg.sin());
            cos.push(arg.cos());
        }
        data.extend(cos);
        data.extend(sin);
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}
