//! Plain ViT image encoder with windowed attention, decomposed relative
//! position bias and a convolutional neck.

use candle_core::{Tensor, D};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Activation, LayerNorm, LayerNorm2d, Linear, Mlp};
use crate::params::{Init, Param, ParamBuilder};

#[derive(Debug)]
pub(crate) struct EncoderAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    heads: usize,
    rel_pos: Option<(Param, Param)>,
}

impl EncoderAttention {
    fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, rel_pos_size: Option<usize>) -> Result<Self> {
        let rel_pos = match rel_pos_size {
            Some(n) => {
                let hd = dim / heads;
                Some((
                    pb.get((2 * n - 1, hd), "rel_pos_h", Init::Normal { std: 0.02 })?,
                    pb.get((2 * n - 1, hd), "rel_pos_w", Init::Normal { std: 0.02 })?,
                ))
            }
            None => None,
        };
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim, true)?,
            k: Linear::new(&mut pb.pp("k"), dim, dim, true)?,
            v: Linear::new(&mut pb.pp("v"), dim, dim, true)?,
            proj: Linear::new(&mut pb.pp("proj"), dim, dim, true)?,
            heads,
            rel_pos,
        })
    }

    /// `x`: (B, H, W, C).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let hd = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, h * w, self.heads, hd))?
                .permute((0, 2, 1, 3))?
                .reshape((b * self.heads, h * w, hd))?
                .contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn = (&q * scale)?.matmul(&k.t()?)?;
        if let Some((rh, rw)) = &self.rel_pos {
            attn = add_decomposed_rel_pos(&attn, &q, &rh.tensor(), &rw.tensor(), (h, w))?;
        }
        let attn = softmax_last(&attn)?;
        let out = attn
            .matmul(&v)?
            .reshape((b, self.heads, h, w, hd))?
            .permute((0, 2, 3, 1, 4))?
            .reshape((b, h, w, c))?;
        self.proj.forward(&out)
    }
}

/// Gathers relative position embeddings for a square `size x size` attention map.
fn rel_pos_table(size: usize, table: &Tensor) -> Result<Tensor> {
    let n = table.dim(0)?;
    if n != 2 * size - 1 {
        return Err(Error::Shape(format!(
            "relative position table has {n} rows, need {}",
            2 * size - 1
        )));
    }
    let idx: Vec<u32> = (0..size)
        .flat_map(|i| (0..size).map(move |j| (i + size - 1 - j) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, size * size, table.device())?;
    let hd = table.dim(1)?;
    Ok(table.index_select(&idx, 0)?.reshape((size, size, hd))?)
}

fn add_decomposed_rel_pos(
    attn: &Tensor,
    q: &Tensor,
    rel_pos_h: &Tensor,
    rel_pos_w: &Tensor,
    (h, w): (usize, usize),
) -> Result<Tensor> {
    let r_h = rel_pos_table(h, rel_pos_h)?; // (h, h, hd)
    let r_w = rel_pos_table(w, rel_pos_w)?; // (w, w, hd)
    let (b, _, hd) = q.dims3()?;
    let r_q = q.reshape((b, h, w, hd))?;
    // rel_h[b, i, j, k] = sum_c r_q[b, i, j, c] * r_h[i, k, c]
    let rel_h = r_q
        .permute((1, 0, 2, 3))?
        .reshape((h, b * w, hd))?
        .contiguous()?
        .matmul(&r_h.transpose(1, 2)?.contiguous()?)?
        .reshape((h, b, w, h))?
        .permute((1, 0, 2, 3))?;
    // rel_w[b, i, j, k] = sum_c r_q[b, i, j, c] * r_w[j, k, c]
    let rel_w = r_q
        .permute((2, 0, 1, 3))?
        .reshape((w, b * h, hd))?
        .contiguous()?
        .matmul(&r_w.transpose(1, 2)?.contiguous()?)?
        .reshape((w, b, h, w))?
        .permute((1, 2, 0, 3))?;
    let attn = attn
        .reshape((b, h, w, h, w))?
        .broadcast_add(&rel_h.unsqueeze(D::Minus1)?)?
        .broadcast_add(&rel_w.unsqueeze(3)?)?;
    Ok(attn.reshape((b, h * w, h * w))?)
}

#[derive(Debug)]
pub(crate) struct EncoderBlock {
    norm1: LayerNorm,
    pub attn: EncoderAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shortcut = x.clone();
        let mut h = self.norm1.forward(x)?;
        let (_, gh, gw, _) = x.dims4()?;
        if self.window > 0 {
            let (parts, pad_hw) = window_partition(&h, self.window)?;
            let out = self.attn.forward(&parts)?;
            h = window_unpartition(&out, self.window, pad_hw, (gh, gw))?;
        } else {
            h = self.attn.forward(&h)?;
        }
        let x = (shortcut + h)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + m)?)
    }
}

fn window_partition(x: &Tensor, ws: usize) -> Result<(Tensor, (usize, usize))> {
    let (b, h, w, c) = x.dims4()?;
    let ph = (ws - h % ws) % ws;
    let pw = (ws - w % ws) % ws;
    let mut x = x.clone();
    if ph > 0 {
        x = x.pad_with_zeros(1, 0, ph)?;
    }
    if pw > 0 {
        x = x.pad_with_zeros(2, 0, pw)?;
    }
    let (hp, wp) = (h + ph, w + pw);
    let parts = x
        .reshape((b, hp / ws, ws, wp / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (hp / ws) * (wp / ws), ws, ws, c))?;
    Ok((parts, (hp, wp)))
}

fn window_unpartition(
    parts: &Tensor,
    ws: usize,
    (hp, wp): (usize, usize),
    (h, w): (usize, usize),
) -> Result<Tensor> {
    let c = parts.dim(3)?;
    let b = parts.dim(0)? / ((hp / ws) * (wp / ws));
    let mut x = parts
        .reshape((b, hp / ws, wp / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, hp, wp, c))?;
    if hp > h {
        x = x.narrow(1, 0, h)?;
    }
    if wp > w {
        x = x.narrow(2, 0, w)?;
    }
    Ok(x.contiguous()?)
}

#[derive(Debug)]
pub(crate) struct ImageEncoder {
    patch_weight: Param,
    patch_bias: Param,
    pos_embed: Param,
    pub blocks: Vec<EncoderBlock>,
    neck_conv1: Param,
    neck_norm1: LayerNorm2d,
    neck_conv2: Param,
    neck_norm2: LayerNorm2d,
    patch: usize,
}

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.encoder_width;
        let g = cfg.grid_size();
        let p = cfg.patch_size;
        let fan_in = 3 * p * p;
        let patch_weight = pb.get(
            (c, 3, p, p),
            "patch_embed.weight",
            Init::Uniform {
                bound: 1.0 / (fan_in as f64).sqrt(),
            },
        )?;
        let patch_bias = pb.get(c, "patch_embed.bias", Init::Zeros)?;
        let pos_embed = pb.get((1, g, g, c), "pos_embed", Init::SinCos2d)?;
        let mut blocks = Vec::with_capacity(cfg.encoder_blocks);
        for i in 0..cfg.encoder_blocks {
            let window = if cfg.global_attn_blocks.contains(&i) {
                0
            } else {
                cfg.window_size
            };
            let span = if window > 0 { window } else { g };
            let mut bb = pb.pp(format!("block{i}"));
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(&mut bb.pp("norm1"), c, 1e-6)?,
                attn: EncoderAttention::new(
                    &mut bb.pp("attn"),
                    c,
                    cfg.encoder_heads,
                    cfg.use_rel_pos.then_some(span),
                )?,
                norm2: LayerNorm::new(&mut bb.pp("norm2"), c, 1e-6)?,
                mlp: Mlp::new(
                    &mut bb.pp("mlp"),
                    c,
                    c * cfg.encoder_mlp_ratio,
                    c,
                    2,
                    Activation::Gelu,
                )?,
                window,
            });
        }
        let out = cfg.decoder_width;
        let mut neck = pb.pp("neck");
        let neck_conv1 = neck.get(
            (out, c, 1, 1),
            "conv1.weight",
            Init::Uniform {
                bound: 1.0 / (c as f64).sqrt(),
            },
        )?;
        let neck_norm1 = LayerNorm2d::new(&mut neck.pp("norm1"), out, 1e-6)?;
        let neck_conv2 = neck.get(
            (out, out, 3, 3),
            "conv2.weight",
            Init::Uniform {
                bound: 1.0 / ((out * 9) as f64).sqrt(),
            },
        )?;
        let neck_norm2 = LayerNorm2d::new(&mut neck.pp("norm2"), out, 1e-6)?;
        Ok(Self {
            patch_weight,
            patch_bias,
            pos_embed,
            blocks,
            neck_conv1,
            neck_norm1,
            neck_conv2,
            neck_norm2,
            patch: p,
        })
    }

    /// `image`: (B, 3, S, S). Returns the pre-neck token grid (B, g, g, C)
    /// and the neck embedding (B, D, g, g).
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = image.conv2d(&self.patch_weight.tensor(), 0, self.patch, 1, 1)?;
        let c = x.dim(1)?;
        let x = x.broadcast_add(&self.patch_bias.tensor().reshape((1, c, 1, 1))?)?;
        let mut x = x.permute((0, 2, 3, 1))?.contiguous()?;
        x = x.broadcast_add(&self.pos_embed.tensor())?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        let tokens = x.clone();
        let n = x.permute((0, 3, 1, 2))?.contiguous()?;
        let n = n.conv2d(&self.neck_conv1.tensor(), 0, 1, 1, 1)?;
        let n = self.neck_norm1.forward(&n)?;
        let n = n.conv2d(&self.neck_conv2.tensor(), 1, 1, 1, 1)?;
        let n = self.neck_norm2.forward(&n)?;
        Ok((tokens, n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn window_roundtrip_with_padding() {
        let x = Tensor::randn(0f32, 1., (1, 6, 5, 3), &Device::Cpu).unwrap();
        let (parts, pad) = window_partition(&x, 4).unwrap();
        assert_eq!(parts.dims(), &[4, 4, 4, 3]);
        let y = window_unpartition(&parts, 4, pad, (6, 5)).unwrap();
        let d = (x - y).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn rel_pos_matches_einsum_definition() {
        let (b, h, w, hd) = (2, 3, 2, 4);
        let q = Tensor::randn(0f32, 1., (b, h * w, hd), &Device::Cpu).unwrap();
        let rh = Tensor::randn(0f32, 1., (2 * h - 1, hd), &Device::Cpu).unwrap();
        let rw = Tensor::randn(0f32, 1., (2 * w - 1, hd), &Device::Cpu).unwrap();
        let attn = Tensor::zeros((b, h * w, h * w), candle_core::DType::F32, &Device::Cpu).unwrap();
        let got: Vec<f32> = add_decomposed_rel_pos(&attn, &q, &rh, &rw, (h, w))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let qv: Vec<f32> = q.flatten_all().unwrap().to_vec1().unwrap();
        let rhv: Vec<f32> = rh.flatten_all().unwrap().to_vec1().unwrap();
        let rwv: Vec<f32> = rw.flatten_all().unwrap().to_vec1().unwrap();
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..h {
                        for l in 0..w {
                            let mut e = 0f32;
                            for c in 0..hd {
                                let qc = qv[(bi * h * w + i * w + j) * hd + c];
                                e += qc * rhv[(i + h - 1 - k) * hd + c];
                                e += qc * rwv[(j + w - 1 - l) * hd + c];
                            }
                            let idx = ((bi * h * w + i * w + j) * h + k) * w + l;
                            assert!((got[idx] - e).abs() < 1e-4);
                        }
                    }
                }
            }
        }
    }
}
