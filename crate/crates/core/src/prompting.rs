//! Point prompts: train-time samplers and the inference grid.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Positive,
    Negative,
}

/// A labeled point in pixel coordinates: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f32,
    pub y: f32,
    pub label: PointLabel,
}

impl PromptPoint {
    pub fn positive(x: f32, y: f32) -> Self {
        Self {
            x,
            y,
            label: PointLabel::Positive,
        }
    }

    pub fn negative(x: f32, y: f32) -> Self {
        Self {
            x,
            y,
            label: PointLabel::Negative,
        }
    }

    fn at_pixel((x, y): (usize, usize), label: PointLabel) -> Self {
        Self {
            x: x as f32,
            y: y as f32,
            label,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<PromptPoint>,
    /// Ground-truth instance the prompt was drawn from, if any.
    pub instance_id: Option<u32>,
}

impl PromptSet {
    pub fn new(points: Vec<PromptPoint>) -> Self {
        Self {
            points,
            instance_id: None,
        }
    }

    pub fn with_instance(mut self, id: u32) -> Self {
        self.instance_id = Some(id);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that every point lies inside a `width x height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < width as f32 && p.y < height as f32) {
                return Err(Error::Input(format!(
                    "point ({}, {}) outside the {width}x{height} image",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }

    /// One single-point prompt per point, in order.
    pub fn split_points(&self) -> Vec<PromptSet> {
        self.points
            .iter()
            .map(|&p| PromptSet {
                points: vec![p],
                instance_id: self.instance_id,
            })
            .collect()
    }
}

/// One positive point drawn uniformly from the mask's foreground.
pub fn sample_single_positive(mask: &BinaryMask, rng: &mut impl Rng) -> Result<PromptSet> {
    let fg = mask.foreground();
    if fg.is_empty() {
        return Err(Error::Input("cannot sample a positive point from an empty mask".into()));
    }
    let p = fg[rng.random_range(0..fg.len())];
    Ok(PromptSet::new(vec![PromptPoint::at_pixel(p, PointLabel::Positive)]))
}

/// Width of the sampling band around a mask boundary:
/// `max(min_width, relative_width * equivalent_diameter)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandConfig {
    pub min_width: f64,
    pub relative_width: f64,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            min_width: 2.0,
            relative_width: 0.05,
        }
    }
}

impl BandConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_width.is_finite() && self.min_width > 0.0) {
            return Err(Error::Config(format!(
                "band min_width must be positive, got {}",
                self.min_width
            )));
        }
        if !(self.relative_width.is_finite() && self.relative_width >= 0.0) {
            return Err(Error::Config(format!(
                "band relative_width must be non-negative, got {}",
                self.relative_width
            )));
        }
        Ok(())
    }

    /// Band width in pixels for a mask with `area` foreground pixels.
    pub fn width_for_area(&self, area: usize) -> f64 {
        let diameter = 2.0 * (area as f64 / std::f64::consts::PI).sqrt();
        self.min_width.max(self.relative_width * diameter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiConfig {
    pub positives: usize,
    pub negatives: usize,
    pub band: BandConfig,
}

impl Default for MultiConfig {
    fn default() -> Self {
        Self {
            positives: 4,
            negatives: 2,
            band: BandConfig::default(),
        }
    }
}

/// Departures from band sampling taken by [`sample_multi`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Too few foreground pixels in the band; sampled the whole mask.
    PositivesUniform,
    /// Fewer foreground pixels than positives; sampled with replacement.
    PositivesWithReplacement,
    /// Too few background pixels in the band; sampled all background.
    NegativesUniform,
    /// Fewer background pixels than negatives; sampled with replacement.
    NegativesWithReplacement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiSample {
    pub prompt: PromptSet,
    pub band_width: f64,
    pub fallbacks: Vec<Fallback>,
}

/// Positive points inside the mask and negative points outside it, both
/// drawn from the band of pixels within `band_width` of the boundary.
pub fn sample_multi(mask: &BinaryMask, cfg: &MultiConfig, rng: &mut impl Rng) -> Result<MultiSample> {
    cfg.band.validate()?;
    let (w, h) = mask.shape();
    let area = mask.count();
    if area == 0 {
        return Err(Error::Input("cannot sample prompts from an empty mask".into()));
    }
    if area == w * h {
        return Err(Error::Input(
            "mask covers the whole image; no negative points are possible".into(),
        ));
    }
    let band = cfg.band.width_for_area(area);
    let band_sq = band * band;
    let bits = mask.to_bools();
    let bg_bits: Vec<bool> = bits.iter().map(|b| !b).collect();
    let dist_to_bg = squared_edt(&bg_bits, w, h);
    let dist_to_fg = squared_edt(&bits, w, h);

    let mut fg_all = Vec::new();
    let mut bg_all = Vec::new();
    let mut fg_band = Vec::new();
    let mut bg_band = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if bits[i] {
                fg_all.push((x, y));
                if dist_to_bg[i] <= band_sq {
                    fg_band.push((x, y));
                }
            } else {
                bg_all.push((x, y));
                if dist_to_fg[i] <= band_sq {
                    bg_band.push((x, y));
                }
            }
        }
    }

    let mut fallbacks = Vec::new();
    let mut points = Vec::with_capacity(cfg.positives + cfg.negatives);
    let pos = pick(
        &fg_band,
        &fg_all,
        cfg.positives,
        rng,
        &mut fallbacks,
        (Fallback::PositivesUniform, Fallback::PositivesWithReplacement),
    );
    points.extend(pos.into_iter().map(|p| PromptPoint::at_pixel(p, PointLabel::Positive)));
    let neg = pick(
        &bg_band,
        &bg_all,
        cfg.negatives,
        rng,
        &mut fallbacks,
        (Fallback::NegativesUniform, Fallback::NegativesWithReplacement),
    );
    points.extend(neg.into_iter().map(|p| PromptPoint::at_pixel(p, PointLabel::Negative)));
    Ok(MultiSample {
        prompt: PromptSet::new(points),
        band_width: band,
        fallbacks,
    })
}

fn pick(
    band: &[(usize, usize)],
    all: &[(usize, usize)],
    k: usize,
    rng: &mut impl Rng,
    fallbacks: &mut Vec<Fallback>,
    (uniform, replacement): (Fallback, Fallback),
) -> Vec<(usize, usize)> {
    if k == 0 {
        return Vec::new();
    }
    let pool = if band.len() >= k {
        band
    } else if all.len() >= k {
        fallbacks.push(uniform);
        all
    } else {
        fallbacks.push(replacement);
        return (0..k).map(|_| all[rng.random_range(0..all.len())]).collect();
    };
    index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Squared Euclidean distance from every pixel to the nearest `true` site,
/// `f64::INFINITY` when there are no sites.
pub fn squared_edt(sites: &[bool], width: usize, height: usize) -> Vec<f64> {
    let inf = f64::INFINITY;
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { inf }).collect();
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&d[..width]);
    }
    grid
}

/// Lower envelope of parabolas rooted at `(q, f[q])`.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: usize = 0;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        d.fill(f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// `n x n` positive points at the cell centers of an even lattice over a
/// square image.
pub fn grid_prompts(image_size: usize, n_per_side: usize) -> Result<PromptSet> {
    if n_per_side == 0 {
        return Err(Error::Config("grid needs at least one point per side".into()));
    }
    let step = image_size as f32 / n_per_side as f32;
    let mut points = Vec::with_capacity(n_per_side * n_per_side);
    for j in 0..n_per_side {
        for i in 0..n_per_side {
            points.push(PromptPoint::positive(
                (i as f32 + 0.5) * step,
                (j as f32 + 0.5) * step,
            ));
        }
    }
    Ok(PromptSet::new(points))
}
