//! Synthetic scenes with exact depth: a fronto-parallel background plane and
//! a few axis-aligned rectangles in front of it, shaded by `albedo * d_near / depth`.

mod io;

pub use io::{
    decode_pfm, decode_ppm, encode_pfm, encode_ppm, read_dataset, read_manifest, read_pfm, read_ppm, write_dataset, write_pfm, write_ppm,
    write_ppm_gray, DatasetEntry, PpmReport, MANIFEST,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::params::splitmix64;
use crate::numcore::Tensor;
use crate::par::{self, Execution};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of rectangles.
    pub min_objects: usize,
    pub max_objects: usize,
    pub d_near: f64,
    pub d_far: f64,
    /// The background sits in `[background_min * d_far, d_far]`.
    pub background_min: f64,
    pub albedo_min: f64,
    pub albedo_max: f64,
    /// Per-channel multiplicative colour jitter, `1 +- tint`.
    pub tint: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 4,
            d_near: 1.0,
            d_far: 10.0,
            background_min: 0.7,
            albedo_min: 0.8,
            albedo_max: 1.0,
            tint: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("scene size {}x{} is empty", self.height, self.width)));
        }
        if !(self.d_near > 0.0) || !(self.d_far > self.d_near) {
            return Err(Error::Config(format!("depth range [{}, {}] needs 0 < d_near < d_far", self.d_near, self.d_far)));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!("object range {}..={} is empty", self.min_objects, self.max_objects)));
        }
        if !(self.background_min > 0.0 && self.background_min <= 1.0) || self.background_min * self.d_far < self.d_near {
            return Err(Error::Config(format!("background_min {} outside (d_near/d_far, 1]", self.background_min)));
        }
        if !(0.0 <= self.albedo_min && self.albedo_min <= self.albedo_max && self.albedo_max <= 1.0) {
            return Err(Error::Config(format!("albedo range [{}, {}] outside [0, 1]", self.albedo_min, self.albedo_max)));
        }
        if !(0.0..1.0).contains(&self.tint) {
            return Err(Error::Config(format!("tint {} outside [0, 1)", self.tint)));
        }
        Ok(())
    }

    /// Same spec with the seed of the `index`-th dataset sample.
    pub fn for_index(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: sample_seed(self.seed, index),
            ..self.clone()
        }
    }
}

pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Axis-aligned rectangle covering rows `y0..y1` and columns `x0..x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub depth: f64,
    pub albedo: [f64; 3],
}

impl Rect {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub depth: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` metres.
    pub depth: Tensor,
    /// Row-major validity, `H * W`.
    pub mask: Vec<bool>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn all_valid(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Mirror left-right.
    pub fn flipped(&self) -> SceneSample {
        let (h, w) = (self.height(), self.width());
        let flip = |data: &[f64], planes: usize| {
            let mut out = vec![0.0; data.len()];
            for p in 0..planes {
                for y in 0..h {
                    for x in 0..w {
                        out[(p * h + y) * w + x] = data[(p * h + y) * w + (w - 1 - x)];
                    }
                }
            }
            out
        };
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                mask[y * w + x] = self.mask[y * w + w - 1 - x];
            }
        }
        SceneSample {
            image: Tensor::new(vec![3, h, w], flip(self.image.data(), 3)).expect("same shape"),
            depth: Tensor::new(vec![h, w], flip(self.depth.data(), 1)).expect("same shape"),
            mask,
        }
    }
}

/// Painter's algorithm: far to near, so the nearest surface wins per pixel.
pub fn render(height: usize, width: usize, background: &Background, objects: &[Rect], d_near: f64) -> SceneSample {
    let n = height * width;
    let mut depth = vec![background.depth; n];
    let mut albedo = vec![background.albedo; n];
    let mut order: Vec<&Rect> = objects.iter().collect();
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for r in order {
        for y in r.y0..r.y1.min(height) {
            for x in r.x0..r.x1.min(width) {
                let i = y * width + x;
                if r.depth < depth[i] {
                    depth[i] = r.depth;
                    albedo[i] = r.albedo;
                }
            }
        }
    }
    let mut image = vec![0.0; 3 * n];
    for i in 0..n {
        let shade = d_near / depth[i];
        for c in 0..3 {
            image[c * n + i] = (albedo[i][c] * shade).clamp(0.0, 1.0);
        }
    }
    SceneSample {
        image: Tensor::new(vec![3, height, width], image).expect("3 planes"),
        depth: Tensor::new(vec![height, width], depth).expect("one plane"),
        mask: vec![true; n],
    }
}

fn draw_albedo(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> [f64; 3] {
    let base = if spec.albedo_max > spec.albedo_min {
        rng.gen_range(spec.albedo_min..=spec.albedo_max)
    } else {
        spec.albedo_min
    };
    let mut a = [0.0; 3];
    for v in &mut a {
        let jitter = if spec.tint > 0.0 { rng.gen_range(-spec.tint..=spec.tint) } else { 0.0 };
        *v = (base * (1.0 + jitter)).clamp(0.0, 1.0);
    }
    a
}

/// Background plane plus `k` random rectangles; a pure function of `spec`.
pub fn scene_layout(spec: &SceneSpec) -> Result<(Background, Vec<Rect>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_depth = rng.gen_range(spec.background_min * spec.d_far..=spec.d_far);
    let background = Background {
        depth: bg_depth,
        albedo: draw_albedo(&mut rng, spec),
    };
    let k = rng.gen_range(spec.min_objects..=spec.max_objects);
    let (h, w) = (spec.height, spec.width);
    let side = |rng: &mut ChaCha8Rng, n: usize| {
        let lo = (n / 8).max(1);
        let hi = (n / 2).max(lo);
        rng.gen_range(lo..=hi)
    };
    let mut objects = Vec::with_capacity(k);
    for _ in 0..k {
        let (rh, rw) = (side(&mut rng, h), side(&mut rng, w));
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        let depth = if bg_depth > spec.d_near {
            rng.gen_range(spec.d_near..bg_depth)
        } else {
            spec.d_near
        };
        objects.push(Rect {
            x0,
            y0,
            x1: x0 + rw,
            y1: y0 + rh,
            depth,
            albedo: draw_albedo(&mut rng, spec),
        });
    }
    Ok((background, objects))
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneSample> {
    let (background, objects) = scene_layout(spec)?;
    Ok(render(spec.height, spec.width, &background, &objects, spec.d_near))
}

/// Samples `0..n` of the dataset defined by `spec`.
pub fn generate_dataset(spec: &SceneSpec, n: usize, exec: Execution) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    par::map_range(exec, n, |i| generate_scene(&spec.for_index(i))).into_iter().collect()
}
