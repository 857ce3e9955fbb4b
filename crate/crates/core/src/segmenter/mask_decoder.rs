//! Two-way transformer mask decoder with hypernetwork mask heads and an
//! IoU prediction head.

use candle_core::Tensor;

use super::config::ModelConfig;
use crate::error::Result;
use crate::nn::{
    softmax_last, Activation, ConvTranspose2x2, LayerNorm, LayerNorm2d, Linear, Mlp,
};
use crate::params::{Init, Param, ParamBuilder};

#[derive(Debug)]
pub(crate) struct DecoderAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
}

impl DecoderAttention {
    fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        let inner = dim / downsample;
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), dim, inner, true)?,
            k: Linear::new(&mut pb.pp("k"), dim, inner, true)?,
            v: Linear::new(&mut pb.pp("v"), dim, inner, true)?,
            out: Linear::new(&mut pb.pp("out"), inner, dim, true)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.split(&self.q.forward(q)?)?;
        let k = self.split(&self.k.forward(k)?)?;
        let v = self.split(&self.v.forward(v)?)?;
        let (b, h, n, hd) = q.dims4()?;
        let attn = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&attn)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, h * hd))?;
        self.out.forward(&out)
    }

    pub fn projections_mut(&mut self) -> [(&'static str, &mut Linear); 4] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("out", &mut self.out),
        ]
    }
}

#[derive(Debug)]
pub(crate) struct TwoWayBlock {
    pub self_attn: DecoderAttention,
    norm1: LayerNorm,
    pub cross_t2i: DecoderAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    norm4: LayerNorm,
    pub cross_i2t: DecoderAttention,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let a = self.cross_t2i.forward(&q, &k, keys)?;
        let queries = self.norm2.forward(&(queries + a)?)?;

        let m = self.mlp.forward(&queries)?;
        let queries = self.norm3.forward(&(queries + m)?)?;

        let q = (&queries + query_pe)?;
        let a = self.cross_i2t.forward(&k, &q, &queries)?;
        let keys = self.norm4.forward(&(keys + a)?)?;
        Ok((queries, keys))
    }
}

#[derive(Debug)]
pub(crate) struct MaskDecoder {
    iou_token: Param,
    mask_tokens: Param,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: DecoderAttention,
    norm_final: LayerNorm,
    up1: ConvTranspose2x2,
    up_norm: LayerNorm2d,
    up2: ConvTranspose2x2,
    pub hyper: Vec<Mlp>,
    pub iou_head: Mlp,
    n_mask_tokens: usize,
}

/// Raw decoder outputs for all mask tokens.
pub(crate) struct DecoderOutput {
    /// (B, T, 4g, 4g)
    pub low_res: Tensor,
    /// (B, T)
    pub iou: Tensor,
}

impl MaskDecoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_width;
        let t = cfg.mask_tokens();
        let iou_token = pb.get((1, d), "iou_token", Init::Normal { std: 1.0 })?;
        let mask_tokens = pb.get((t, d), "mask_tokens", Init::Normal { std: 1.0 })?;
        let mut blocks = Vec::with_capacity(cfg.decoder_blocks);
        for i in 0..cfg.decoder_blocks {
            let mut bb = pb.pp(format!("block{i}"));
            let heads = cfg.decoder_heads;
            let ds = cfg.attention_downsample;
            blocks.push(TwoWayBlock {
                self_attn: DecoderAttention::new(&mut bb.pp("self_attn"), d, heads, 1)?,
                norm1: LayerNorm::new(&mut bb.pp("norm1"), d, 1e-5)?,
                cross_t2i: DecoderAttention::new(&mut bb.pp("cross_t2i"), d, heads, ds)?,
                norm2: LayerNorm::new(&mut bb.pp("norm2"), d, 1e-5)?,
                mlp: Mlp::new(&mut bb.pp("mlp"), d, cfg.decoder_mlp_dim, d, 2, Activation::Relu)?,
                norm3: LayerNorm::new(&mut bb.pp("norm3"), d, 1e-5)?,
                norm4: LayerNorm::new(&mut bb.pp("norm4"), d, 1e-5)?,
                cross_i2t: DecoderAttention::new(&mut bb.pp("cross_i2t"), d, heads, ds)?,
                skip_first_pe: i == 0,
            });
        }
        let final_attn = DecoderAttention::new(
            &mut pb.pp("final_attn"),
            d,
            cfg.decoder_heads,
            cfg.attention_downsample,
        )?;
        let norm_final = LayerNorm::new(&mut pb.pp("norm_final"), d, 1e-5)?;
        let up1 = ConvTranspose2x2::new(&mut pb.pp("upscale.0"), d, d / 4)?;
        let up_norm = LayerNorm2d::new(&mut pb.pp("upscale.1"), d / 4, 1e-6)?;
        let up2 = ConvTranspose2x2::new(&mut pb.pp("upscale.3"), d / 4, d / 8)?;
        let mut hyper = Vec::with_capacity(t);
        for i in 0..t {
            hyper.push(Mlp::new(&mut pb.pp(format!("hyper.{i}")), d, d, d / 8, 3, Activation::Relu)?);
        }
        let iou_head = Mlp::new(
            &mut pb.pp("iou_head"),
            d,
            cfg.iou_head_hidden,
            t,
            cfg.iou_head_depth,
            Activation::Relu,
        )?;
        Ok(Self {
            iou_token,
            mask_tokens,
            blocks,
            final_attn,
            norm_final,
            up1,
            up_norm,
            up2,
            hyper,
            iou_head,
            n_mask_tokens: t,
        })
    }

    /// `image`: (1, D, g, g) embedding; `image_pe`: (D, g, g);
    /// `sparse`: (B, N, D) prompt tokens; `dense`: (1, D, g, g).
    pub fn forward(
        &self,
        image: &Tensor,
        image_pe: &Tensor,
        sparse: &Tensor,
        dense: &Tensor,
    ) -> Result<DecoderOutput> {
        let (b, _, d) = sparse.dims3()?;
        let (_, _, g, _) = image.dims4()?;
        let t = self.n_mask_tokens;
        let out_tokens = Tensor::cat(&[self.iou_token.tensor(), self.mask_tokens.tensor()], 0)?
            .unsqueeze(0)?
            .broadcast_as((b, 1 + t, d))?;
        let tokens = Tensor::cat(&[&out_tokens, sparse], 1)?;

        let src = (image + dense)?
            .broadcast_as((b, d, g, g))?
            .reshape((b, d, g * g))?
            .transpose(1, 2)?
            .contiguous()?;
        let pos = image_pe
            .reshape((1, d, g * g))?
            .transpose(1, 2)?
            .broadcast_as((b, g * g, d))?
            .contiguous()?;

        let mut queries = tokens.clone();
        let mut keys = src;
        for blk in &self.blocks {
            let (q, k) = blk.forward(&queries, &keys, &tokens, &pos)?;
            queries = q;
            keys = k;
        }
        let q = (&queries + &tokens)?;
        let k = (&keys + &pos)?;
        let a = self.final_attn.forward(&q, &k, &keys)?;
        let queries = self.norm_final.forward(&(queries + a)?)?;

        let iou_out = queries.narrow(1, 0, 1)?.squeeze(1)?;
        let mask_out = queries.narrow(1, 1, t)?;

        let src = keys.transpose(1, 2)?.reshape((b, d, g, g))?;
        let up = self.up1.forward(&src)?;
        let up = self.up_norm.forward(&up)?.gelu_erf()?;
        let up = self.up2.forward(&up)?.gelu_erf()?; // (B, D/8, 4g, 4g)
        let c = up.dim(1)?;

        let mut hyper_in = Vec::with_capacity(t);
        for (i, mlp) in self.hyper.iter().enumerate() {
            hyper_in.push(mlp.forward(&mask_out.narrow(1, i, 1)?.squeeze(1)?)?);
        }
        let hyper_in = Tensor::stack(&hyper_in, 1)?; // (B, T, C)
        let side = 4 * g;
        let masks = hyper_in
            .matmul(&up.reshape((b, c, side * side))?)?
            .reshape((b, t, side, side))?;
        let iou = self.iou_head.forward(&iou_out)?;
        Ok(DecoderOutput {
            low_res: masks,
            iou,
        })
    }
}
