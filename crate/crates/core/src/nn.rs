//! Parameter storage and the handful of layers the backbones need.
//!
//! Layers keep shared handles ([`Var`]) into a [`ParamStore`]; the store owns
//! naming, initialization, freezing and (de)serialization. Every parameter is
//! created on the host from a seeded generator so model construction is
//! reproducible bit-for-bit.

use std::collections::{BTreeMap, HashMap};
use std::hash::{DefaultHasher, Hasher};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel batch variance below which [`BnPolicy::VarSubstitute`]
/// falls back to the stored running variance.
pub const VAR_SUBSTITUTE_THRESHOLD: f64 = 1e-3;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// How encoder batch-normalization layers source their statistics while
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Batch statistics.
    Train,
    /// Stored running statistics.
    Eval,
    /// Batch statistics, except channels whose batch variance falls below
    /// [`VAR_SUBSTITUTE_THRESHOLD`] use the running variance.
    VarSubstitute,
}

/// How a forward pass in a batch-statistics mode updates running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsUpdate {
    None,
    /// Exponential moving average with momentum 0.1.
    Momentum,
    /// Cumulative average; `seen` batches have already been folded in.
    Cumulative { seen: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnCtx {
    pub policy: BnPolicy,
    pub update: StatsUpdate,
}

impl BnCtx {
    pub const EVAL: BnCtx = BnCtx {
        policy: BnPolicy::Eval,
        update: StatsUpdate::None,
    };

    pub fn train(policy: BnPolicy) -> Self {
        let update = match policy {
            BnPolicy::Eval => StatsUpdate::None,
            _ => StatsUpdate::Momentum,
        };
        BnCtx { policy, update }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    buffer: bool,
}

/// Named collection of parameters and buffers.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        ParamStore {
            device: device.clone(),
            entries: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, tensor: Tensor, buffer: bool) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.entries.insert(
            name,
            Entry {
                var: var.clone(),
                buffer,
            },
        );
        Ok(var)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    /// Trainable parameters (buffers such as running statistics excluded),
    /// in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.buffer)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_tensor().clone()))
            .collect()
    }

    /// Order-sensitive hash of every parameter and buffer value.
    pub fn checksum(&self) -> Result<u64> {
        let mut hasher = DefaultHasher::new();
        for (name, e) in &self.entries {
            hasher.write(name.as_bytes());
            let values = e
                .var
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            for v in values {
                hasher.write_u32(v.to_bits());
            }
        }
        Ok(hasher.finish())
    }

    /// Overwrites values from `tensors`. Store names starting with
    /// `store_prefix` are looked up as `source_prefix + rest`; every such
    /// name must be present.
    pub fn load_from(
        &self,
        tensors: &HashMap<String, Tensor>,
        store_prefix: &str,
        source_prefix: &str,
        source_name: &str,
    ) -> Result<()> {
        let mut missing = Vec::new();
        for (name, e) in &self.entries {
            let Some(rest) = name.strip_prefix(store_prefix) else {
                continue;
            };
            let key = format!("{source_prefix}{rest}");
            match tensors.get(&key) {
                None => missing.push(key),
                Some(t) => {
                    if t.dims() != e.var.dims() {
                        return Err(Error::Shape(format!(
                            "{key}: expected {:?}, found {:?} in {source_name}",
                            e.var.dims(),
                            t.dims()
                        )));
                    }
                    let t = t.to_dtype(e.var.dtype())?.to_device(&self.device)?.copy()?;
                    e.var.set(&t)?;
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingWeights {
                source_name: source_name.to_string(),
                missing,
            })
        }
    }

    /// Copies all values whose names match after swapping prefixes.
    pub fn copy_from(&self, other: &ParamStore, own_prefix: &str, other_prefix: &str) -> Result<()> {
        self.load_from(&other.tensors(), own_prefix, other_prefix, "parameter store")
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)?;
        Ok(())
    }
}

/// Scoped constructor that names and initializes parameters.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Builder {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn qualified(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut *self.rng) as f32).collect();
        let t = Tensor::from_vec(data, shape, self.store.device())?;
        let q = self.qualified(name);
        self.store.insert(q, t, false)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f32, buffer: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, self.store.device())?;
        let q = self.qualified(name);
        self.store.insert(q, t, buffer)
    }

    /// Draws a fresh sub-seed; keeps sibling constructions independent of
    /// each other's parameter counts.
    pub fn fork_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// 2-D convolution without bias (all residual-family convs are bias-free).
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = (2.0 / (out_ch * kernel * kernel) as f64).sqrt();
        let weight = b.normal("weight", &[out_ch, in_ch, kernel, kernel], std)?;
        Ok(Conv2d {
            weight,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?)
    }
}

/// Transposed 2-D convolution (kernel = stride, no overlap), bias-free.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(b: &mut Builder<'_>, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let std = (2.0 / (out_ch * kernel * kernel) as f64).sqrt();
        let weight = b.normal("weight", &[in_ch, out_ch, kernel, kernel], std)?;
        Ok(ConvTranspose2d {
            weight,
            stride: kernel,
        })
    }

    /// With kernel equal to stride every output pixel receives exactly one
    /// input pixel, so the op is a per-pixel matmul followed by a reshuffle.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let k = self.stride;
        let c_out = self.weight.dim(1)?;
        let rows = x.permute((0, 2, 3, 1))?.reshape((b * h * w, c_in))?;
        let kernel = self.weight.as_tensor().reshape((c_in, c_out * k * k))?;
        Ok(rows
            .matmul(&kernel)?
            .reshape((b, h, w, c_out, k, k))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, c_out, h * k, w * k))?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: b.constant("weight", &[channels], 1.0, false)?,
            bias: b.constant("bias", &[channels], 0.0, false)?,
            running_mean: b.constant("running_mean", &[channels], 0.0, true)?,
            running_var: b.constant("running_var", &[channels], 1.0, true)?,
        })
    }

    fn per_channel(t: &Tensor) -> Result<Tensor> {
        let c = t.dim(0)?;
        Ok(t.reshape((1, c, 1, 1))?)
    }

    pub fn running_var(&self) -> &Tensor {
        self.running_var.as_tensor()
    }

    pub fn running_mean(&self) -> &Tensor {
        self.running_mean.as_tensor()
    }

    pub fn forward(&self, x: &Tensor, ctx: BnCtx) -> Result<Tensor> {
        let dtype = x.dtype();
        let weight = Self::per_channel(self.weight.as_tensor())?.to_dtype(dtype)?;
        let bias = Self::per_channel(self.bias.as_tensor())?.to_dtype(dtype)?;
        let running_var = Self::per_channel(&self.running_var.as_tensor().detach())?.to_dtype(dtype)?;
        let (mean, var) = match ctx.policy {
            BnPolicy::Eval => {
                let mean =
                    Self::per_channel(&self.running_mean.as_tensor().detach())?.to_dtype(dtype)?;
                (mean, running_var)
            }
            BnPolicy::Train | BnPolicy::VarSubstitute => {
                let (b, _, h, w) = x.dims4()?;
                let n = b * h * w;
                let mean = x.mean_keepdim((0, 2, 3))?;
                let batch_var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
                self.update_running(&mean, &batch_var, n, ctx.update)?;
                let var = if ctx.policy == BnPolicy::VarSubstitute {
                    let floor = running_var.maximum(VAR_SUBSTITUTE_THRESHOLD)?;
                    batch_var
                        .lt(VAR_SUBSTITUTE_THRESHOLD)?
                        .where_cond(&floor, &batch_var)?
                } else {
                    batch_var
                };
                (mean, var)
            }
        };
        let inv_std = (var + BN_EPS)?.sqrt()?.recip()?;
        let scale = weight.mul(&inv_std)?;
        Ok(x.broadcast_sub(&mean)?
            .broadcast_mul(&scale)?
            .broadcast_add(&bias)?)
    }

    fn update_running(
        &self,
        mean: &Tensor,
        var: &Tensor,
        n: usize,
        update: StatsUpdate,
    ) -> Result<()> {
        let (old_w, new_w) = match update {
            StatsUpdate::None => return Ok(()),
            StatsUpdate::Momentum => (1.0 - BN_MOMENTUM, BN_MOMENTUM),
            StatsUpdate::Cumulative { seen } => {
                let s = seen as f64;
                (s / (s + 1.0), 1.0 / (s + 1.0))
            }
        };
        let dtype = self.running_mean.dtype();
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        let mean = mean.detach().flatten_all()?.to_dtype(dtype)?;
        let var = (var.detach().flatten_all()? * unbias)?.to_dtype(dtype)?;
        let new_mean = ((self.running_mean.as_tensor() * old_w)? + (mean * new_w)?)?;
        let new_var = ((self.running_var.as_tensor() * old_w)? + (var * new_w)?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        Ok(())
    }
}

/// Seeded generator used for all parameter initialization.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(channels: usize) -> (ParamStore, BatchNorm2d) {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = seeded_rng(0);
        let mut b = Builder::new(&mut store, &mut rng, "bn");
        let layer = BatchNorm2d::new(&mut b, channels).unwrap();
        (store, layer)
    }

    #[test]
    fn var_substitute_uses_running_variance_for_quiet_channels() {
        let (store, layer) = bn(2);
        store
            .get("bn.running_var")
            .unwrap()
            .set(&Tensor::new(&[4.0f32, 4.0], &Device::Cpu).unwrap())
            .unwrap();
        // channel 0: values ±sqrt(5e-4) -> batch variance 5e-4
        // channel 1: values ±sqrt(0.2)  -> batch variance 0.2
        let a = 5e-4f32.sqrt();
        let c = 0.2f32.sqrt();
        let x = Tensor::new(&[[[[a, -a]], [[c, -c]]]], &Device::Cpu).unwrap();
        let ctx = BnCtx {
            policy: BnPolicy::VarSubstitute,
            update: StatsUpdate::None,
        };
        let y = layer.forward(&x, ctx).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let ch0 = a as f64 / (4.0 + BN_EPS).sqrt();
        let ch1 = c as f64 / (0.2 + BN_EPS).sqrt();
        assert!((y[0] as f64 - ch0).abs() < 1e-6, "{} vs {ch0}", y[0]);
        assert!((y[2] as f64 - ch1).abs() < 1e-5, "{} vs {ch1}", y[2]);
    }

    #[test]
    fn var_substitute_is_finite_on_constant_batches() {
        let (store, layer) = bn(3);
        store
            .get("bn.running_var")
            .unwrap()
            .set(&Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let x = Tensor::full(7.5f32, (4, 3, 5, 5), &Device::Cpu).unwrap();
        let ctx = BnCtx::train(BnPolicy::VarSubstitute);
        let y = layer.forward(&x, ctx).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_ignores_batch_composition() {
        let (_store, layer) = bn(2);
        let a = Tensor::new(&[[[[1.0f32, 2.0]], [[3.0, -1.0]]]], &Device::Cpu).unwrap();
        let other = Tensor::new(&[[[[100.0f32, -50.0]], [[0.5, 9.0]]]], &Device::Cpu).unwrap();
        let batch = Tensor::cat(&[&a, &other], 0).unwrap();
        let alone = layer.forward(&a, BnCtx::EVAL).unwrap();
        let mixed = layer.forward(&batch, BnCtx::EVAL).unwrap().narrow(0, 0, 1).unwrap();
        let d = (alone - mixed).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn momentum_update_tracks_unbiased_variance() {
        let (_store, layer) = bn(1);
        let x = Tensor::new(&[[[[1.0f32, 3.0]]]], &Device::Cpu).unwrap();
        layer.forward(&x, BnCtx::train(BnPolicy::Train)).unwrap();
        let m = layer.running_mean().to_vec1::<f32>().unwrap()[0];
        let v = layer.running_var().to_vec1::<f32>().unwrap()[0];
        assert!((m - 0.2).abs() < 1e-6);
        // unbiased variance of {1,3} is 2
        assert!((v - (0.9 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn transposed_conv_matches_reference_op() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = seeded_rng(3);
        let mut b = Builder::new(&mut store, &mut rng, "up");
        let layer = ConvTranspose2d::new(&mut b, 5, 3, 2).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 3, 4), &Device::Cpu).unwrap();
        let ours = layer.forward(&x).unwrap();
        let reference = x
            .conv_transpose2d(store.get("up.weight").unwrap(), 0, 0, 2, 1)
            .unwrap();
        assert_eq!(ours.dims(), &[2, 3, 6, 8]);
        let d = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn missing_keys_are_named() {
        let (store, _layer) = bn(2);
        let mut tensors = store.tensors();
        tensors.remove("bn.running_var");
        let err = store.load_from(&tensors, "", "", "test.safetensors").unwrap_err();
        assert!(err.to_string().contains("bn.running_var"), "{err}");
    }
}
