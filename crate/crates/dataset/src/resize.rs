//! Resampling of tiles to the model input size.

use fieldsam_core::{Image, InstanceMask};

use crate::error::{DataError, Result};
use crate::sample::SampleRecord;

/// Bilinear resampling with pixel centres at half-integer positions and
/// clamped borders.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Image {
    let (sw, sh, c) = (img.width(), img.height(), img.channels());
    if (sw, sh) == (width, height) {
        return img.clone();
    }
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let mut out = Image::zeros(width, height, c);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = (fx - x0 as f64) as f32;
            for k in 0..c {
                let top = img.get(x0, y0, k) * (1.0 - tx) + img.get(x1, y0, k) * tx;
                let bottom = img.get(x0, y1, k) * (1.0 - tx) + img.get(x1, y1, k) * tx;
                out.set(x, y, k, top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Nearest-neighbour resampling; output values are a subset of the input's.
pub fn resize_nearest(mask: &InstanceMask, width: usize, height: usize) -> InstanceMask {
    let (sw, sh) = (mask.width(), mask.height());
    if (sw, sh) == (width, height) {
        return mask.clone();
    }
    let mut out = InstanceMask::new(width, height);
    for y in 0..height {
        let src_y = (((y as f64 + 0.5) * sh as f64 / height as f64) as usize).min(sh - 1);
        for x in 0..width {
            let src_x = (((x as f64 + 0.5) * sw as f64 / width as f64) as usize).min(sw - 1);
            out.set(x, y, mask.get(src_x, src_y));
        }
    }
    out
}

/// Brings a square tile to `size × size`: bilinear for the image, nearest
/// for the instance map. Tiles already at `size` pass through unchanged.
/// Instances lost to downsampling are dropped and the rest relabelled.
pub fn resize_for_model(sample: &SampleRecord, size: usize) -> Result<SampleRecord> {
    let (w, h) = sample.size();
    if w != h {
        return Err(DataError::Input(format!("{}: tile is {w}x{h}, expected square", sample.meta.id)));
    }
    if w == size {
        return Ok(sample.clone());
    }
    let mut meta = sample.meta.clone();
    if let Some(g) = &mut meta.georef {
        g.pixel_size *= w as f64 / size as f64;
    }
    let image = resize_bilinear(&sample.image, size, size);
    let mask = resize_nearest(&sample.mask, size, size);
    SampleRecord::new(meta, image, mask)
}
