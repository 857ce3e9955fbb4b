//! Named parameter registry with per-parameter trainable flags.
//!
//! Every weight is a [`Var`]; layers hold cheap [`Param`] handles that share
//! storage with the registry. A frozen parameter is handed to the forward
//! pass as a detached tensor, so it never enters the gradient graph and is
//! never given to the optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

struct ParamInner {
    name: String,
    var: Var,
    trainable: AtomicBool,
}

#[derive(Clone)]
pub struct Param(Arc<ParamInner>);

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Param({}, {:?}, trainable={})",
            self.name(),
            self.dims(),
            self.is_trainable()
        )
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: &Tensor, trainable: bool) -> Result<Self> {
        Ok(Self(Arc::new(ParamInner {
            name: name.into(),
            var: Var::from_tensor(&value.to_dtype(DType::F32)?)?,
            trainable: AtomicBool::new(trainable),
        })))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn var(&self) -> &Var {
        &self.0.var
    }

    /// The value as seen by the forward pass: tracked when trainable,
    /// detached otherwise.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.0.var.as_tensor().clone()
        } else {
            self.0.var.as_tensor().detach()
        }
    }

    /// A detached copy of the current value, safe to keep across optimizer steps.
    pub fn snapshot(&self) -> Result<Tensor> {
        Ok(self.0.var.as_tensor().detach().copy()?)
    }

    pub fn is_trainable(&self) -> bool {
        self.0.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.trainable.store(trainable, Ordering::Relaxed)
    }

    pub fn dims(&self) -> &[usize] {
        self.0.var.dims()
    }

    pub fn elem_count(&self) -> usize {
        self.0.var.elem_count()
    }

    /// Overwrites the value in place; the shape must match.
    pub fn assign(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.dims() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                self.name(),
                self.dims(),
                value.dims()
            )));
        }
        self.0.var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }
}

/// Ordered registry of all parameters of a model.
#[derive(Default, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Param) -> Result<Param> {
        if self.index.contains_key(param.name()) {
            return Err(Error::Config(format!(
                "duplicate parameter name {}",
                param.name()
            )));
        }
        self.index.insert(param.name().to_string(), self.params.len());
        self.params.push(param.clone());
        Ok(param)
    }

    /// Removes a parameter from the registry. Layers still holding the
    /// handle keep working; the parameter simply stops being counted.
    pub fn remove(&mut self, name: &str) -> Option<Param> {
        let i = self.index.remove(name)?;
        let p = self.params.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(p)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Param::elem_count).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.is_trainable())
            .map(Param::elem_count)
            .sum()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .iter()
            .filter(|p| p.is_trainable())
            .map(|p| p.var().clone())
            .collect()
    }

    pub fn set_trainable_where(&self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in &self.params {
            if pred(p.name()) {
                p.set_trainable(trainable);
            }
        }
    }

    pub fn freeze_all(&self) {
        self.set_trainable_where(|_| true, false);
    }
}

/// How fresh parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Uniform { bound: f64 },
    /// Fixed 2-D sine-cosine table for a `(1, H, W, C)` grid embedding:
    /// the first half of the channels encodes rows, the second half columns.
    SinCos2d,
}

fn sincos_2d(h: usize, w: usize, c: usize) -> Vec<f32> {
    let quarter = c / 4;
    let freq = |i: usize| 1.0 / 10000f64.powf(i as f64 / quarter.max(1) as f64);
    let mut v = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = &mut v[(y * w + x) * c..(y * w + x + 1) * c];
            for i in 0..quarter {
                let (fy, fx) = (y as f64 * freq(i), x as f64 * freq(i));
                row[i] = fy.sin() as f32;
                row[quarter + i] = fy.cos() as f32;
                row[2 * quarter + i] = fx.sin() as f32;
                row[3 * quarter + i] = fx.cos() as f32;
            }
        }
    }
    v
}

/// Whether to honour [`Init`] or fill everything with zeros. Zero fill is
/// used when only the geometry matters (parameter audits, checkpoint loading).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    Random,
    Zeros,
}

pub struct BuildState {
    pub store: ParamStore,
    rng: ChaCha8Rng,
    fill: Fill,
    device: Device,
}

impl BuildState {
    pub fn new(rng: ChaCha8Rng, fill: Fill, device: Device) -> Self {
        Self {
            store: ParamStore::new(),
            rng,
            fill,
            device,
        }
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            state: self,
            prefix: String::new(),
        }
    }
}

/// Hierarchical builder that registers parameters under dotted names.
pub struct ParamBuilder<'a> {
    state: &'a mut BuildState,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            state: &mut *self.state,
            prefix,
        }
    }

    pub fn device(&self) -> &Device {
        &self.state.device
    }

    pub fn get(&mut self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Param> {
        let shape: Shape = shape.into();
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let n = shape.elem_count();
        let init = match self.state.fill {
            Fill::Zeros => Init::Zeros,
            Fill::Random => init,
        };
        let value = match init {
            Init::Zeros => Tensor::zeros(shape, DType::F32, &self.state.device)?,
            Init::Ones => Tensor::ones(shape, DType::F32, &self.state.device)?,
            Init::Normal { std } => {
                let dist = Normal::new(0.0f32, std as f32)
                    .map_err(|e| Error::Config(format!("normal init: {e}")))?;
                let v: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.state.rng)).collect();
                Tensor::from_vec(v, shape, &self.state.device)?
            }
            Init::Uniform { bound } => {
                let b = bound as f32;
                let dist = Uniform::new_inclusive(-b, b)
                    .map_err(|e| Error::Config(format!("uniform init: {e}")))?;
                let v: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.state.rng)).collect();
                Tensor::from_vec(v, shape, &self.state.device)?
            }
            Init::SinCos2d => {
                let &[1, h, w, c] = shape.dims() else {
                    return Err(Error::Config(format!("{full}: sin-cos init needs a (1, H, W, C) shape")));
                };
                Tensor::from_vec(sincos_2d(h, w, c), shape, &self.state.device)?
            }
        };
        let param = Param::new(full, &value, true)?;
        self.state.store.insert(param)
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.state.rng
    }
}
