//! Raster masks: bit-packed binary masks, integer instance maps and a
//! run-length encoding used by the prediction file format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A binary mask stored row-major, 64 pixels per word.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Builds a mask from row-major booleans.
    pub fn from_bools(width: usize, height: usize, data: &[bool]) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        let mut m = Self::new(width, height);
        for (i, &v) in data.iter().enumerate() {
            if v {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        debug_assert!(x < self.width && y < self.height);
        let i = y * self.width + x;
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Self) -> Result<usize> {
        self.check_same_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_count(&self, other: &Self) -> Result<usize> {
        self.check_same_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    /// Coordinates of all foreground pixels in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.count());
        for (wi, &w) in self.words.iter().enumerate() {
            let mut bits = w;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                let i = wi * 64 + b;
                out.push((i % self.width, i / self.width));
                bits &= bits - 1;
            }
        }
        out
    }

    /// Row-major booleans.
    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.width * self.height)
            .map(|i| self.words[i / 64] >> (i % 64) & 1 == 1)
            .collect()
    }

    /// Logical negation, restricted to the valid pixel range.
    pub fn complement(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, !self.get(x, y));
            }
        }
        out
    }

    /// Binarizes a row-major logit map at `threshold` (strictly greater is foreground).
    pub fn from_logits(width: usize, height: usize, logits: &[f32], threshold: f32) -> Result<Self> {
        if logits.len() != width * height {
            return Err(Error::Shape(format!(
                "expected {} logits, got {}",
                width * height,
                logits.len()
            )));
        }
        let mut m = Self::new(width, height);
        for (i, &v) in logits.iter().enumerate() {
            if v > threshold {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(m)
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the foreground.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let fg = self.foreground();
        if fg.is_empty() {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (x, y) in fg {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Some((x0, y0, x1, y1))
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }

    /// Row-major `0.0`/`1.0` values.
    pub fn to_f32(&self) -> Vec<f32> {
        self.to_bools()
            .into_iter()
            .map(|b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Row-major run-length encoding. `counts` alternates background and
/// foreground runs, always starting with a (possibly zero) background run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for v in mask.to_bools() {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            width: mask.width,
            height: mask.height,
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::Input(format!(
                "RLE covers {total} pixels, expected {}",
                self.width * self.height
            )));
        }
        let mut m = BinaryMask::new(self.width, self.height);
        let mut i = 0usize;
        for (k, &c) in self.counts.iter().enumerate() {
            if k % 2 == 1 {
                for j in i..i + c as usize {
                    m.words[j / 64] |= 1 << (j % 64);
                }
            }
            i += c as usize;
        }
        Ok(m)
    }
}

/// Integer instance map: 0 is background, `k > 0` is instance `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    ids: Vec<u32>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::Shape(format!(
                "expected {} ids for {width}x{height}, got {}",
                width * height,
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u32) {
        self.ids[y * self.width + x] = id;
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.ids
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.ids
    }

    /// Sorted distinct non-zero ids.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.ids.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn instance(&self, id: u32) -> BinaryMask {
        let mut m = BinaryMask::new(self.width, self.height);
        for (i, &v) in self.ids.iter().enumerate() {
            if v == id && id != 0 {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        m
    }

    /// One binary mask per instance, in ascending id order.
    pub fn instances(&self) -> Vec<(u32, BinaryMask)> {
        self.instance_ids()
            .into_iter()
            .map(|id| (id, self.instance(id)))
            .collect()
    }

    /// Relabels instances to `1..=n` preserving their relative order.
    pub fn relabel_dense(&self) -> Self {
        let ids = self.instance_ids();
        let lookup: std::collections::HashMap<u32, u32> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i as u32 + 1))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            ids: self
                .ids
                .iter()
                .map(|v| if *v == 0 { 0 } else { lookup[v] })
                .collect(),
        }
    }

    pub fn is_dense(&self) -> bool {
        self.instance_ids()
            .iter()
            .enumerate()
            .all(|(i, &id)| id == i as u32 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_count() {
        let mut m = BinaryMask::new(13, 7);
        m.set(12, 6, true);
        m.set(0, 0, true);
        assert!(m.get(12, 6));
        assert!(!m.get(11, 6));
        assert_eq!(m.count(), 2);
        assert_eq!(m.foreground(), vec![(0, 0), (12, 6)]);
        assert_eq!(m.bbox(), Some((0, 0, 12, 6)));
    }

    #[test]
    fn complement_has_no_padding_bits() {
        let m = BinaryMask::new(5, 5);
        assert_eq!(m.complement().count(), 25);
    }

    #[test]
    fn rle_roundtrip_edges() {
        let m = BinaryMask::from_fn(4, 3, |x, y| (x + y) % 3 == 0);
        let rle = m.to_rle();
        assert_eq!(rle.counts[0], 0);
        assert_eq!(rle.decode().unwrap(), m);
        let empty = BinaryMask::new(4, 4);
        assert_eq!(empty.to_rle().counts, vec![16]);
    }

    #[test]
    fn rle_rejects_wrong_total() {
        let rle = Rle {
            width: 2,
            height: 2,
            counts: vec![1, 1],
        };
        assert!(rle.decode().is_err());
    }

    #[test]
    fn relabel_dense_preserves_order() {
        let m = InstanceMask::from_vec(2, 2, vec![0, 7, 3, 7]).unwrap();
        let d = m.relabel_dense();
        assert_eq!(d.as_slice(), &[0, 2, 1, 2]);
        assert!(d.is_dense());
        assert!(!m.is_dense());
    }
}
