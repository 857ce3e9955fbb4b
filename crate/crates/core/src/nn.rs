//! Layers built from differentiable tensor primitives.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::lora::{lora_forward, project, LoraAdapter};
use crate::params::{Init, Param, ParamBuilder};

/// Fully connected layer, `y = x W^T + b`, optionally carrying a low-rank adapter.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
    adapter: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.get((out_dim, in_dim), "weight", Init::Uniform { bound })?;
        let bias = if bias {
            Some(pb.get(out_dim, "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            adapter: None,
        })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.adapter.as_ref()
    }

    pub fn attach(&mut self, adapter: LoraAdapter) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::AlreadyAdapted);
        }
        let w = self.weight.dims();
        if adapter.b.dims()[0] != w[0] || adapter.a.dims()[1] != w[1] {
            return Err(Error::Shape(format!(
                "adapter for {} does not fit weight {:?}",
                self.weight.name(),
                w
            )));
        }
        self.adapter = Some(adapter);
        Ok(())
    }

    /// Removes the adapter, returning it.
    pub fn detach_adapter(&mut self) -> Option<LoraAdapter> {
        self.adapter.take()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor();
        let y = match &self.adapter {
            Some(ad) => lora_forward(x, &w, &ad.pair()?, ad.scaling)?,
            None => project(x, &w)?,
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.tensor())?),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the trailing dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Param,
    bias: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.get(dim, "weight", Init::Ones)?,
            bias: pb.get(dim, "bias", Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.weight.tensor())?
            .broadcast_add(&self.bias.tensor())?)
    }
}

/// Layer normalization over the channel axis of `(B, C, H, W)` maps.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    weight: Param,
    bias: Param,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.get(channels, "weight", Init::Ones)?,
            bias: pb.get(channels, "bias", Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.weight.tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.tensor().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu_erf()?,
        })
    }
}

/// Stack of linear layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        act: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let n_in = if i == 0 { in_dim } else { hidden };
            let n_out = if i + 1 == depth { out_dim } else { hidden };
            layers.push(Linear::new(&mut pb.pp(format!("layer{i}")), n_in, n_out, true)?);
        }
        Ok(Self { layers, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < n {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }
}

/// Numerically stable softmax over the trailing dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Transposed convolution with kernel 2 and stride 2, written as a matmul
/// followed by a pixel shuffle. Weight layout is `(c_in, c_out, 2, 2)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    weight: Param,
    bias: Param,
    c_in: usize,
    c_out: usize,
}

impl ConvTranspose2x2 {
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((c_out * 4) as f64).sqrt();
        Ok(Self {
            weight: pb.get((c_in, c_out, 2, 2), "weight", Init::Uniform { bound })?,
            bias: pb.get(c_out, "bias", Init::Zeros)?,
            c_in,
            c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.c_in {
            return Err(Error::Shape(format!(
                "conv-transpose expects {} channels, got {c}",
                self.c_in
            )));
        }
        let xt = x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
        let wm = self.weight.tensor().reshape((c, self.c_out * 4))?;
        let y = xt.matmul(&wm)?; // (bhw, c_out*4)
        let y = y
            .reshape((b, h, w, self.c_out, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, self.c_out, 2 * h, 2 * w))?;
        Ok(y.broadcast_add(&self.bias.tensor().reshape((1, self.c_out, 1, 1))?)?)
    }
}

/// Interpolation matrix `(out, in)` for 1-D bilinear resampling with
/// half-pixel centers (the `align_corners = false` convention).
pub fn bilinear_matrix(in_size: usize, out_size: usize) -> Vec<f32> {
    let mut m = vec![0f32; out_size * in_size];
    let scale = in_size as f64 / out_size as f64;
    for o in 0..out_size {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_size - 1);
        let i1 = (i0 + 1).min(in_size - 1);
        let frac = (src - i0 as f64) as f32;
        m[o * in_size + i0] += 1.0 - frac;
        m[o * in_size + i1] += frac;
    }
    m
}

/// Bilinearly resizes the trailing two dimensions of `x` to `(out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let n = dims.len();
    if n < 2 {
        return Err(Error::Shape("resize needs at least 2 dims".into()));
    }
    let (h, w) = (dims[n - 2], dims[n - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let lead: usize = dims[..n - 2].iter().product();
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?;
    let rx = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?;
    // rows: (lead, h, w) -> (lead, h, out_w)
    let t = x.reshape((lead * h, w))?.matmul(&rx.t()?)?;
    let t = t
        .reshape((lead, h, out_w))?
        .transpose(1, 2)?
        .reshape((lead * out_w, h))?
        .matmul(&ry.t()?)?;
    let t = t.reshape((lead, out_w, out_h))?.transpose(1, 2)?;
    let mut out_dims = dims;
    out_dims[n - 2] = out_h;
    out_dims[n - 1] = out_w;
    Ok(t.contiguous()?.reshape(out_dims)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{BuildState, Fill};
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> BuildState {
        BuildState::new(ChaCha8Rng::seed_from_u64(0), Fill::Random, Device::Cpu)
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(4, 16), (16, 4), (3, 7), (1, 5)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f32 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let x = Tensor::full(2.5f32, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 8, 12).unwrap();
        assert_eq!(y.dims(), &[2, 3, 8, 12]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| (a - 2.5).abs() < 1e-6));
    }

    #[test]
    fn bilinear_matches_half_pixel_reference() {
        // 2 -> 4: output centers at 0.25, 0.75, 1.25, 1.75 in input pixel units minus 0.5
        let m = bilinear_matrix(2, 4);
        let x = [0.0f32, 1.0];
        let y: Vec<f32> = (0..4).map(|o| m[o * 2] * x[0] + m[o * 2 + 1] * x[1]).collect();
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn conv_transpose_matches_direct_definition() {
        let mut st = state();
        let conv = ConvTranspose2x2::new(&mut st.root().pp("up"), 3, 2).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 3, 2, 3), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 6]);
        let wv: Vec<f32> = conv.weight.tensor().flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yv: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        for co in 0..2 {
            for oy in 0..4 {
                for ox in 0..6 {
                    let (iy, ky, ix, kx) = (oy / 2, oy % 2, ox / 2, ox % 2);
                    let mut s = 0f32;
                    for ci in 0..3 {
                        s += xv[ci * 6 + iy * 3 + ix] * wv[((ci * 2 + co) * 2 + ky) * 2 + kx];
                    }
                    let got = yv[co * 24 + oy * 6 + ox];
                    assert!((got - s).abs() < 1e-5, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut st = state();
        let ln = LayerNorm::new(&mut st.root().pp("ln"), 4, 1e-6).unwrap();
        let x = Tensor::new(&[[1f32, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y: Vec<f32> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f32 = y.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::new(&[[1000f32, 1000., 999.]], &Device::Cpu).unwrap();
        let y = softmax_last(&x).unwrap();
        let s = y.sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
