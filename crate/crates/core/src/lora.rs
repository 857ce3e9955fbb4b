//! Low-rank adapters for frozen projection weights.
//!
//! A frozen weight `W0` of shape `d x k` is augmented with a factor pair
//! `A: r x k`, `B: d x r` so the effective weight is `W0 + s * B * A`.
//! The low-rank path is always evaluated as two thin products,
//! `B * (A * x)`, and the dense delta is only formed by [`merge`].

use std::collections::BTreeSet;

use candle_core::{Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Param, ParamStore};

/// Which attention projections receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    EncoderQ,
    EncoderV,
    DecoderQ,
    DecoderV,
}

impl LoraTarget {
    pub fn is_encoder(self) -> bool {
        matches!(self, LoraTarget::EncoderQ | LoraTarget::EncoderV)
    }
}

impl std::fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LoraTarget::EncoderQ => "encoder_q",
            LoraTarget::EncoderV => "encoder_v",
            LoraTarget::DecoderQ => "decoder_q",
            LoraTarget::DecoderV => "decoder_v",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub targets: BTreeSet<LoraTarget>,
    #[serde(default = "default_scaling")]
    pub scaling: f64,
    /// Whether the decoder's final token-to-image attention is adapted when
    /// decoder targets are requested.
    #[serde(default = "default_true")]
    pub include_final_decoder_attn: bool,
}

fn default_scaling() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl LoraSpec {
    pub fn new(rank: usize, targets: impl IntoIterator<Item = LoraTarget>) -> Self {
        Self {
            rank,
            targets: targets.into_iter().collect(),
            scaling: 1.0,
            include_final_decoder_attn: true,
        }
    }

    /// Query and value projections of every encoder block.
    pub fn encoder_qv(rank: usize) -> Self {
        Self::new(rank, [LoraTarget::EncoderQ, LoraTarget::EncoderV])
    }

    /// Encoder q/v plus every decoder attention q/v.
    pub fn encoder_decoder_qv(rank: usize) -> Self {
        Self::new(
            rank,
            [
                LoraTarget::EncoderQ,
                LoraTarget::EncoderV,
                LoraTarget::DecoderQ,
                LoraTarget::DecoderV,
            ],
        )
    }

    pub fn with_scaling(mut self, scaling: f64) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn has_decoder_targets(&self) -> bool {
        self.targets.iter().any(|t| !t.is_encoder())
    }

    pub fn has_encoder_targets(&self) -> bool {
        self.targets.iter().any(|t| t.is_encoder())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.scaling.is_finite() && self.scaling > 0.0) {
            return Err(Error::Config(format!(
                "LoRA scaling must be positive, got {}",
                self.scaling
            )));
        }
        Ok(())
    }
}

/// A low-rank factor pair: `a` is `r x k`, `b` is `d x r`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let (r, _k) = a.dims2()?;
        let (_d, r2) = b.dims2()?;
        if r != r2 {
            return Err(Error::Shape(format!(
                "A has rank {r} but B has rank {r2}"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }

    /// Shape `(d, k)` of the weight this pair adapts.
    pub fn base_shape(&self) -> (usize, usize) {
        (self.b.dims()[0], self.a.dims()[1])
    }

    /// Dense `B * A`. Only used for merging and tests.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?)
    }
}

fn check_pair_against(w0: &Tensor, pair: &LoraPair) -> Result<(usize, usize)> {
    let (d, k) = w0.dims2()?;
    if pair.base_shape() != (d, k) {
        return Err(Error::Shape(format!(
            "adapter expects base {:?}, weight is {:?}",
            pair.base_shape(),
            (d, k)
        )));
    }
    Ok((d, k))
}

/// `W0 x + s B (A x)` for `x` of shape `(k,)` or `(..., k)`.
pub fn lora_forward(x: &Tensor, w0: &Tensor, pair: &LoraPair, scaling: f64) -> Result<Tensor> {
    let (_d, k) = check_pair_against(w0, pair)?;
    let x_k = x.dim(D::Minus1)?;
    if x_k != k {
        return Err(Error::Shape(format!(
            "input inner dimension {x_k} does not match weight columns {k}"
        )));
    }
    let dense = project(x, w0)?;
    let low = project(&project(x, &pair.a)?, &pair.b)?;
    Ok((dense + (low * scaling)?)?)
}

/// Applies `w` (shape `out x in`) to the trailing dimension of `x`.
pub(crate) fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (out, inn) = w.dims2()?;
    let dims = x.dims().to_vec();
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let x2 = x.reshape((lead, inn))?;
    let y = x2.matmul(&w.t()?)?;
    let mut out_dims = dims;
    *out_dims.last_mut().expect("non-scalar input") = out;
    Ok(y.reshape(out_dims)?)
}

/// `W0 + s B A`.
pub fn merge(w0: &Tensor, pair: &LoraPair, scaling: f64) -> Result<Tensor> {
    check_pair_against(w0, pair)?;
    if is_all_zero(&pair.b)? || is_all_zero(&pair.a)? {
        return Ok(w0.clone());
    }
    Ok((w0 + (pair.delta()? * scaling)?)?)
}

fn is_all_zero(t: &Tensor) -> Result<bool> {
    Ok(t.abs()?.max_all()?.to_scalar::<f32>()? == 0.0)
}

/// Fresh pair for a `d x k` weight: `A ~ N(0, 1/k)`, `B = 0`, so the adapted
/// layer computes exactly the base function until `B` is trained.
pub fn init_pair(base_shape: (usize, usize), rank: usize, rng: &mut impl Rng) -> Result<LoraPair> {
    let (d, k) = base_shape;
    if rank == 0 || rank >= d.min(k) {
        return Err(Error::Config(format!(
            "LoRA rank {rank} must satisfy 1 <= r < min({d}, {k})"
        )));
    }
    let std = 1.0 / (k as f32).sqrt();
    let dist = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
    let a: Vec<f32> = (0..rank * k).map(|_| dist.sample(rng)).collect();
    let device = candle_core::Device::Cpu;
    let a = Tensor::from_vec(a, (rank, k), &device)?;
    let b = Tensor::zeros((d, rank), candle_core::DType::F32, &device)?;
    LoraPair::new(a, b)
}

/// Trainable adapter attached to a [`Linear`].
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: Param,
    pub b: Param,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn pair(&self) -> Result<LoraPair> {
        LoraPair::new(self.a.tensor(), self.b.tensor())
    }

    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }
}

/// A projection exposed by a model for adaptation.
pub struct ProjectionSite<'a> {
    pub name: String,
    pub target: Option<LoraTarget>,
    pub linear: &'a mut Linear,
}

/// Models whose attention projections can carry adapters.
pub trait Adaptable {
    /// Visits every adaptable projection together with the model's registry.
    fn visit_projections(
        &mut self,
        spec: &LoraSpec,
        f: &mut dyn FnMut(ProjectionSite<'_>, &mut ParamStore) -> Result<()>,
    ) -> Result<()>;

    fn param_store(&self) -> &ParamStore;
}

/// Parameter names of the factors attached to projection `name`.
pub fn factor_names(name: &str) -> (String, String) {
    (format!("{name}.lora_a"), format!("{name}.lora_b"))
}

/// Wraps every projection targeted by `spec`, freezing its base weight and
/// bias. Returns the names of the adapted projections.
pub fn inject(model: &mut impl Adaptable, spec: &LoraSpec, rng: &mut impl Rng) -> Result<Vec<String>> {
    spec.validate()?;
    if spec.targets.is_empty() {
        return Err(Error::Config("LoRA target set is empty".into()));
    }
    let mut already = false;
    let mut found: BTreeSet<LoraTarget> = BTreeSet::new();
    let mut shapes = Vec::new();
    model.visit_projections(spec, &mut |site, _| {
        if site.linear.adapter().is_some() {
            already = true;
        }
        if let Some(t) = site.target {
            if spec.targets.contains(&t) {
                found.insert(t);
                let dims = site.linear.weight().dims();
                if dims.len() != 2 {
                    return Err(Error::Shape(format!("{} is not a matrix", site.name)));
                }
                let (d, k) = (dims[0], dims[1]);
                if spec.rank >= d.min(k) {
                    return Err(Error::Config(format!(
                        "LoRA rank {} too large for {} ({d}x{k})",
                        spec.rank, site.name
                    )));
                }
                shapes.push(site.name.clone());
            }
        }
        Ok(())
    })?;
    if already {
        return Err(Error::AlreadyAdapted);
    }
    let missing: Vec<String> = spec
        .targets
        .iter()
        .filter(|t| !found.contains(t))
        .map(|t| t.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTargets(missing));
    }

    let mut adapted = Vec::new();
    model.visit_projections(spec, &mut |site, store| {
        let Some(t) = site.target else { return Ok(()) };
        if !spec.targets.contains(&t) {
            return Ok(());
        }
        let dims = site.linear.weight().dims().to_vec();
        let pair = init_pair((dims[0], dims[1]), spec.rank, rng)?;
        let (an, bn) = factor_names(&site.name);
        let a = store.insert(Param::new(an, &pair.a, true)?)?;
        let b = store.insert(Param::new(bn, &pair.b, true)?)?;
        site.linear.weight().set_trainable(false);
        if let Some(bias) = site.linear.bias() {
            bias.set_trainable(false);
        }
        site.linear.attach(LoraAdapter {
            a,
            b,
            scaling: spec.scaling,
        })?;
        adapted.push(site.name);
        Ok(())
    })?;
    Ok(adapted)
}

/// Exact number of parameters currently flagged trainable.
pub fn count_trainable(model: &impl Adaptable) -> usize {
    model.param_store().trainable_count()
}
