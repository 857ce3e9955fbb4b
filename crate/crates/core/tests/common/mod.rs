#![allow(dead_code)]

use candle_core::{Device, Tensor};
use fieldsam_core::training::{PromptedSample, TrainSample};
use fieldsam_core::BinaryMask;
use fieldsam_core::prompting::{PromptPoint, PromptSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TILE: usize = 64;

/// A 64 px tile split into four axis-aligned fields with random colors.
pub fn rect_tile(rng: &mut ChaCha8Rng) -> TrainSample {
    let s = TILE;
    let cx = 8 * rng.random_range(2..6);
    let cy1 = 8 * rng.random_range(2..6);
    let cy2 = 8 * rng.random_range(2..6);
    let id = move |x: usize, y: usize| -> usize {
        match (x < cx, y < if x < cx { cy1 } else { cy2 }) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }
    };
    let cols: Vec<[f32; 3]> = (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let c = cols[id(x, y)];
            for k in 0..3 {
                data[k * s * s + y * s + x] = c[k] + 0.05 * (rng.random::<f32>() - 0.5);
            }
        }
    }
    let image = Tensor::from_vec(data, (3, s, s), &Device::Cpu).unwrap();
    let instances = (0..4).map(|k| BinaryMask::from_fn(s, s, |x, y| id(x, y) == k)).collect();
    TrainSample { image, instances }
}

pub fn rect_tiles(n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rect_tile(&mut rng)).collect()
}

/// One prompt at the centre of each instance's bounding box.
pub fn centre_prompts(sample: &TrainSample) -> PromptedSample {
    let prompts = sample
        .instances
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (x0, y0, x1, y1) = m.bbox().unwrap();
            PromptSet::new(vec![PromptPoint::positive(
                (x0 + x1) as f32 / 2.0,
                (y0 + y1) as f32 / 2.0,
            )])
            .with_instance(i as u32 + 1)
        })
        .collect();
    PromptedSample {
        image: sample.image.clone(),
        prompts,
        targets: sample.instances.clone(),
    }
}

pub fn random_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..3 * TILE * TILE).map(|_| rng.random()).collect();
    Tensor::from_vec(v, (3, TILE, TILE), &Device::Cpu).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
}
