//! Small layer library over candle tensors.
//!
//! Parameters are created through a [`ParamBuilder`], which either copies a
//! preset tensor (checkpoint or weight transfer) or draws a seeded
//! initialization. Trainable stores wrap every parameter in a [`Var`];
//! frozen stores hand out plain tensors, so no gradient graph is recorded
//! through them.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

mod ops;

pub use ops::{channel_affine_op, group_normalize, im2col_op, softmax_last};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
}

struct StoreInner {
    device: Device,
    dtype: DType,
    preset: BTreeMap<String, Tensor>,
    strict: bool,
    trainable: bool,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

#[derive(Clone)]
pub struct ParamBuilder {
    inner: Rc<RefCell<StoreInner>>,
    prefix: String,
}

impl ParamBuilder {
    /// Fresh parameters drawn from `seed`.
    pub fn init(seed: u64, dtype: DType, device: &Device, trainable: bool) -> Self {
        Self::with_preset(BTreeMap::new(), false, seed, dtype, device, trainable)
    }

    /// Parameters taken from `preset`; names missing from it are initialized
    /// from `seed` unless `strict`, in which case building fails.
    pub fn with_preset(
        preset: BTreeMap<String, Tensor>,
        strict: bool,
        seed: u64,
        dtype: DType,
        device: &Device,
        trainable: bool,
    ) -> Self {
        Self {
            inner: Rc::new(RefCell::new(StoreInner {
                device: device.clone(),
                dtype,
                preset,
                strict,
                trainable,
                rng: ChaCha8Rng::seed_from_u64(seed),
                params: BTreeMap::new(),
                vars: BTreeMap::new(),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            inner: self.inner.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.borrow().device.clone()
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut inner = self.inner.borrow_mut();
        let (dtype, device) = (inner.dtype, inner.device.clone());
        let tensor = match inner.preset.get(&full) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::CheckpointMismatch(format!(
                        "parameter {full}: stored shape {:?}, expected {:?}",
                        t.dims(),
                        shape
                    )));
                }
                t.to_dtype(dtype)?.to_device(&device)?.copy()?.detach()
            }
            None if inner.strict => {
                return Err(Error::CheckpointMismatch(format!("missing parameter {full}")));
            }
            None => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) | Init::FanIn(std) => {
                        let std = match init {
                            Init::FanIn(gain) => {
                                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                                gain / (fan_in as f64).sqrt()
                            }
                            _ => std,
                        };
                        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                        (0..n).map(|_| normal.sample(&mut inner.rng)).collect()
                    }
                };
                Tensor::from_vec(values, shape, &device)?.to_dtype(dtype)?
            }
        };
        if inner.trainable {
            let var = Var::from_tensor(&tensor)?;
            let t = var.as_tensor().clone();
            inner.vars.insert(full.clone(), var);
            inner.params.insert(full, t.clone());
            Ok(t)
        } else {
            inner.params.insert(full, tensor.clone());
            Ok(tensor)
        }
    }

    /// Every parameter created so far, by full name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.inner.borrow().params.clone()
    }

    pub fn vars(&self) -> BTreeMap<String, Var> {
        self.inner.borrow().vars.clone()
    }
}

/// SHA-256 over names, shapes and little-endian f32 values, in name order.
pub fn hash_params(params: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// 2-D convolution, stride 1, "same" zero padding, odd kernel size.
///
/// Implemented as im2col followed by one batched matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    kernel: usize,
}

impl Conv2d {
    pub fn new(vb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize, init: Init) -> Result<Self> {
        let weight = vb.get(&[c_out, c_in, kernel, kernel], "weight", init)?;
        let bias = vb.get(&[c_out], "bias", Init::Zeros)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let c_out = self.weight.dim(0)?;
        let k = self.kernel;
        let cols = im2col_op(x, k)?;
        let wm = Tensor::cat(&[&self.weight.reshape((c_out, c * k * k))?, &self.bias.reshape((c_out, 1))?], 1)?;
        Ok(wm.broadcast_matmul(&cols)?.reshape((b, c_out, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vb: &ParamBuilder, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: vb.get(&[d_out, d_in], "weight", init)?,
            bias: vb.get(&[d_out], "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub fn new(vb: &ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        if !channels.is_multiple_of(groups) {
            return Err(Error::Shape(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            groups,
            weight: vb.get(&[channels], "weight", Init::Ones)?,
            bias: vb.get(&[channels], "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let normed = group_normalize(&g, 1e-5)?.reshape((b, c, h * w))?;
        Ok(channel_affine_op(&normed, &self.weight, &self.bias)?.reshape((b, c, h, w))?)
    }
}

pub fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// (B, C, H, W) -> (B, C*f*f, H/f, W/f)
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {f}")));
    }
    Ok(x.reshape(vec![b, c, h / f, f, w / f, f])?
        .permute(vec![0, 1, 3, 5, 2, 4])?
        .reshape((b, c * f * f, h / f, w / f))?)
}

/// (B, C*f*f, H, W) -> (B, C, H*f, W*f)
pub fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, cff, h, w) = x.dims4()?;
    let c = cff / (f * f);
    Ok(x.reshape(vec![b, c, f, f, h, w])?
        .permute(vec![0, 1, 4, 2, 5, 3])?
        .reshape((b, c, h * f, w * f))?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape(vec![b, c, h, 1, w, 1])?
        .broadcast_as(vec![b, c, h, f, w, f])?
        .reshape((b, c, h * f, w * f))?)
}

#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freq_dim: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(vb: &ParamBuilder, freq_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            freq_dim,
            lin1: Linear::new(&vb.pp("lin1"), freq_dim, dim, Init::FanIn(1.0))?,
            lin2: Linear::new(&vb.pp("lin2"), dim, dim, Init::FanIn(1.0))?,
        })
    }

    /// Sinusoidal features of integer timesteps, then a two-layer MLP.
    pub fn forward(&self, timesteps: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let half = self.freq_dim / 2;
        let mut feats = Vec::with_capacity(timesteps.len() * self.freq_dim);
        for &t in timesteps {
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                feats.push((t as f64 * freq).sin());
            }
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                feats.push((t as f64 * freq).cos());
            }
        }
        let x = Tensor::from_vec(feats, (timesteps.len(), self.freq_dim), device)?.to_dtype(dtype)?;
        self.lin2.forward(&self.lin1.forward(&x)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(vb: &ParamBuilder, c_in: usize, c_out: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&vb.pp("norm1"), c_in, groups_for(c_in))?,
            conv1: Conv2d::new(&vb.pp("conv1"), c_in, c_out, 3, Init::FanIn(1.0))?,
            temb: Linear::new(&vb.pp("temb"), temb_dim, c_out, Init::FanIn(1.0))?,
            norm2: GroupNorm::new(&vb.pp("norm2"), c_out, groups_for(c_out))?,
            conv2: Conv2d::new(&vb.pp("conv2"), c_out, c_out, 3, Init::FanIn(0.5))?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&vb.pp("skip"), c_in, c_out, 1, Init::FanIn(1.0))?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let (b, c, _, _) = h.dims4()?;
        let t = self.temb.forward(&temb.silu()?)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head cross-attention from image positions to text tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    dim: usize,
}

impl CrossAttention {
    pub fn new(vb: &ParamBuilder, channels: usize, text_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&vb.pp("norm"), channels, groups_for(channels))?,
            q: Linear::new(&vb.pp("q"), channels, channels, Init::FanIn(1.0))?,
            k: Linear::new(&vb.pp("k"), text_dim, channels, Init::FanIn(1.0))?,
            v: Linear::new(&vb.pp("v"), text_dim, channels, Init::FanIn(1.0))?,
            out: Linear::new(&vb.pp("out"), channels, channels, Init::FanIn(0.5))?,
            dim: channels,
        })
    }

    /// Returns the updated features and the attention probabilities with
    /// shape `(B, H*W, L)`; every row sums to one.
    pub fn forward(&self, x: &Tensor, text: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let q = self.q.forward(&tokens)?;
        let k = self.k.forward(text)?;
        let v = self.v.forward(text)?;
        let scores = (q.matmul(&k.t()?)? / (self.dim as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let o = self.out.forward(&attn.matmul(&v)?)?;
        let o = o.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok(((x + o)?, attn))
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(vb: &ParamBuilder, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: vb.get(&[vocab, dim], "table", Init::Normal(1.0))?,
        })
    }

    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::Embedding::new(self.table.clone(), self.table.dim(1)?).forward(ids)?)
    }
}

/// AdamW with decoupled weight decay; state is kept per parameter name so it
/// can be checkpointed and restored.
#[derive(Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    vars: BTreeMap<String, Var>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(vars: BTreeMap<String, Var>, lr: f64) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, v) in &vars {
            first.insert(name.clone(), v.zeros_like()?);
            second.insert(name.clone(), v.zeros_like()?);
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            vars,
            first,
            second,
        })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Global L2 norm of the gradients that exist for the tracked vars.
    pub fn grad_norm(&self, grads: &candle_core::backprop::GradStore) -> Result<f64> {
        let mut total = 0f64;
        for v in self.vars.values() {
            if let Some(g) = grads.get(v.as_tensor()) {
                total += g.detach().sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// One update; gradients are multiplied by `grad_scale` first (clipping).
    pub fn step(&mut self, grads: &candle_core::backprop::GradStore, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients can carry their backward graph; keep the state detached.
            let g = g.detach();
            let g = if grad_scale != 1.0 { (g * grad_scale)? } else { g };
            let m = self.first.get_mut(name).expect("state exists for every var");
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = self.second.get_mut(name).expect("state exists for every var");
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let decayed = (var.as_tensor().detach() * (1.0 - self.lr * self.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(decayed - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.first {
            out.insert(format!("optim.m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("optim.v.{k}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (name, var) in &self.vars {
            let m = state
                .get(&format!("optim.m.{name}"))
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing optimizer state for {name}")))?;
            let v = state
                .get(&format!("optim.v.{name}"))
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing optimizer state for {name}")))?;
            self.first.insert(name.clone(), m.to_dtype(var.dtype())?);
            self.second.insert(name.clone(), v.to_dtype(var.dtype())?);
        }
        self.step = step;
        Ok(())
    }
}
