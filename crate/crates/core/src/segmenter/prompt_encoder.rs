//! Point prompt embedding: random Fourier features of the normalized
//! coordinates plus a learned per-label offset.

use std::f64::consts::PI;

use candle_core::{DType, Tensor};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, Param, ParamBuilder};
use crate::prompting::{PointLabel, PromptSet};

#[derive(Debug)]
pub(crate) struct PromptEncoder {
    gaussian: Param,
    negative: Param,
    positive: Param,
    not_a_point: Param,
    no_mask: Param,
    dim: usize,
    image_size: usize,
    grid: usize,
}

/// Sparse and dense prompt embeddings for a batch of prompt sets.
#[derive(Clone, Debug)]
pub struct PromptEmbeddings {
    /// (B, N, D): one embedding per point.
    pub points: Tensor,
    /// (B, 1, D): padding token appended after the points.
    pub padding: Tensor,
    /// (1, D, g, g): dense embedding added to the image embedding.
    pub dense: Tensor,
}

impl PromptEmbeddings {
    pub fn batch(&self) -> usize {
        self.points.dims()[0]
    }

    pub fn points_per_prompt(&self) -> usize {
        self.points.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.points.dims()[2]
    }
}

impl PromptEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_width;
        Ok(Self {
            gaussian: pb.get((2, d / 2), "pe_gaussian", Init::Normal { std: 1.0 })?,
            negative: pb.get((1, d), "point_embed.negative", Init::Normal { std: 1.0 })?,
            positive: pb.get((1, d), "point_embed.positive", Init::Normal { std: 1.0 })?,
            not_a_point: pb.get((1, d), "not_a_point", Init::Normal { std: 1.0 })?,
            no_mask: pb.get((1, d), "no_mask", Init::Normal { std: 1.0 })?,
            dim: d,
            image_size: cfg.image_size,
            grid: cfg.grid_size(),
        })
    }

    /// Fourier features of coordinates already scaled to [0, 1]; `coords`: (..., 2).
    fn fourier(&self, coords: &Tensor) -> Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let dims = c.dims().to_vec();
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let proj = c
            .reshape((lead, 2))?
            .matmul(&self.gaussian.tensor())?
            .affine(2.0 * PI, 0.0)?;
        let enc = Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.dim;
        Ok(enc.reshape(out)?)
    }

    /// Positional encoding of the token grid, (D, g, g).
    pub fn dense_pe(&self) -> Result<Tensor> {
        let g = self.grid;
        let mut coords = Vec::with_capacity(g * g * 2);
        for y in 0..g {
            for x in 0..g {
                coords.push((x as f32 + 0.5) / g as f32);
                coords.push((y as f32 + 0.5) / g as f32);
            }
        }
        let t = Tensor::from_vec(coords, (g, g, 2), self.gaussian.var().device())?;
        Ok(self.fourier(&t)?.permute((2, 0, 1))?.contiguous()?)
    }

    pub fn encode(&self, prompts: &[PromptSet]) -> Result<PromptEmbeddings> {
        let Some(first) = prompts.first() else {
            return Err(Error::Input("empty prompt batch".into()));
        };
        let n = first.points.len();
        if n == 0 {
            return Err(Error::Input("prompt set has no points".into()));
        }
        let b = prompts.len();
        let mut coords = Vec::with_capacity(b * n * 2);
        let mut pos = Vec::with_capacity(b * n);
        let mut neg = Vec::with_capacity(b * n);
        let s = self.image_size as f32;
        for p in prompts {
            if p.points.len() != n {
                return Err(Error::Input(format!(
                    "prompt sets in one batch must have equal point counts ({} vs {n})",
                    p.points.len()
                )));
            }
            for pt in &p.points {
                if !(pt.x >= 0.0 && pt.y >= 0.0 && pt.x < s && pt.y < s) {
                    return Err(Error::Input(format!(
                        "point ({}, {}) outside the {}x{} image",
                        pt.x, pt.y, self.image_size, self.image_size
                    )));
                }
                coords.push((pt.x + 0.5) / s);
                coords.push((pt.y + 0.5) / s);
                let is_pos = pt.label == PointLabel::Positive;
                pos.push(if is_pos { 1f32 } else { 0. });
                neg.push(if is_pos { 0f32 } else { 1. });
            }
        }
        let dev = self.gaussian.var().device();
        let coords = Tensor::from_vec(coords, (b, n, 2), dev)?;
        let pos = Tensor::from_vec(pos, (b, n, 1), dev)?;
        let neg = Tensor::from_vec(neg, (b, n, 1), dev)?;
        let pe = self.fourier(&coords)?;
        let points = pe
            .broadcast_add(&pos.broadcast_mul(&self.positive.tensor().unsqueeze(0)?)?)?
            .broadcast_add(&neg.broadcast_mul(&self.negative.tensor().unsqueeze(0)?)?)?;
        let padding = self
            .not_a_point
            .tensor()
            .unsqueeze(0)?
            .broadcast_as((b, 1, self.dim))?
            .contiguous()?;
        let dense = self
            .no_mask
            .tensor()
            .reshape((1, self.dim, 1, 1))?
            .broadcast_as((1, self.dim, self.grid, self.grid))?
            .contiguous()?;
        Ok(PromptEmbeddings {
            points: points.to_dtype(DType::F32)?,
            padding,
            dense,
        })
    }
}
