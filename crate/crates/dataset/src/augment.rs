//! Training-time augmentation applied jointly to image and instance map.

use fieldsam_core::{Image, InstanceMask};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Draw a uniform multiple of 90° rotation.
    pub rot90: bool,
    /// Multiplicative brightness change drawn from `[-b, b]`.
    pub brightness: f32,
    /// Contrast change about the channel mean drawn from `[-c, c]`.
    pub contrast: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rot90: true,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Configuration that always draws the identity.
    pub fn none() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rot90: false,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.hflip_prob) || !p_ok(self.vflip_prob) {
            return Err(DataError::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(DataError::Config("brightness and contrast ranges must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub brightness: f32,
    pub contrast: f32,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let sym = |r: &mut dyn rand::RngCore, m: f32| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
        Self {
            hflip: rng.random_bool(cfg.hflip_prob),
            vflip: rng.random_bool(cfg.vflip_prob),
            quarter_turns: if cfg.rot90 { rng.random_range(0..4) } else { 0 },
            brightness: sym(rng, cfg.brightness),
            contrast: sym(rng, cfg.contrast),
        }
    }

    /// Output size and the source pixel read by output pixel `(x, y)`.
    fn geometry(&self, w: usize, h: usize) -> ((usize, usize), impl Fn(usize, usize) -> (usize, usize) + '_) {
        let turns = self.quarter_turns % 4;
        let out = if turns % 2 == 1 { (h, w) } else { (w, h) };
        let map = move |x: usize, y: usize| {
            // Undo the rotation, then the flips.
            let (mut sx, mut sy) = match turns {
                0 => (x, y),
                1 => (w - 1 - y, x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (y, h - 1 - x),
            };
            if self.vflip {
                sy = h - 1 - sy;
            }
            if self.hflip {
                sx = w - 1 - sx;
            }
            (sx, sy)
        };
        (out, map)
    }

    pub fn apply_mask(&self, mask: &InstanceMask) -> InstanceMask {
        let ((ow, oh), map) = self.geometry(mask.width(), mask.height());
        let mut out = InstanceMask::new(ow, oh);
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = map(x, y);
                out.set(x, y, mask.get(sx, sy));
            }
        }
        out
    }

    pub fn apply_image(&self, image: &Image) -> Image {
        let c = image.channels();
        let ((ow, oh), map) = self.geometry(image.width(), image.height());
        let mut out = Image::zeros(ow, oh, c);
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = map(x, y);
                for k in 0..c {
                    out.set(x, y, k, image.get(sx, sy, k));
                }
            }
        }
        if self.brightness != 0.0 || self.contrast != 0.0 {
            let n = (ow * oh) as f64;
            let mut mean = vec![0f64; c];
            for px in out.data().chunks_exact(c) {
                for k in 0..c {
                    mean[k] += px[k] as f64 / n;
                }
            }
            for px in out.data_mut().chunks_exact_mut(c) {
                for k in 0..c {
                    let m = mean[k] as f32;
                    px[k] = ((px[k] - m) * (1.0 + self.contrast) + m) * (1.0 + self.brightness);
                }
            }
        }
        out
    }

    pub fn apply(&self, image: &Image, mask: &InstanceMask) -> Result<(Image, InstanceMask)> {
        if (image.width(), image.height()) != (mask.width(), mask.height()) {
            return Err(DataError::Input("image and mask shapes differ".into()));
        }
        Ok((self.apply_image(image), self.apply_mask(mask)))
    }
}

/// Draws one augmentation and applies it to the pair.
pub fn augment(image: &Image, mask: &InstanceMask, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Image, InstanceMask)> {
    cfg.validate()?;
    Augmentation::draw(cfg, rng).apply(image, mask)
}
