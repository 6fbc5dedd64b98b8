//! Random tiles, specs and images for property checks.

use std::ops::RangeInclusive;

use crate::dataset::{paste_tile, PasteMode};
use crate::error::Result;
use crate::model::{Feature, FramedTile, ImageClassSpec, ImageSpec};
use crate::rng::SampleRng;
use crate::tensor::{ImageMatrix, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TileParams {
    pub rows: RangeInclusive<usize>,
    pub cols: RangeInclusive<usize>,
    /// Probability range for a pixel to be in the support.
    pub density: (f64, f64),
    pub epsilon: (f64, f64),
    /// Force pairwise distinct support values.
    pub distinct: bool,
    pub min_support: usize,
}

impl Default for TileParams {
    fn default() -> Self {
        Self {
            rows: 1..=6,
            cols: 1..=6,
            density: (0.3, 1.0),
            epsilon: (0.1, 1.0),
            distinct: true,
            min_support: 1,
        }
    }
}

fn pick(rng: &mut SampleRng, r: &RangeInclusive<usize>) -> usize {
    r.start() + rng.below(r.end() - r.start() + 1)
}

/// Support value in `[0.05, 1)`, away from zero so it stays in the support.
fn support_value(rng: &mut SampleRng) -> f64 {
    rng.uniform(0.05, 1.0)
}

pub fn random_tile(rng: &mut SampleRng, p: &TileParams) -> FramedTile {
    // Redraw shapes too small for the requested support; give up after a
    // few tries and clamp instead.
    let (mut k, mut l) = (pick(rng, &p.rows), pick(rng, &p.cols));
    for _ in 0..64 {
        if k * l >= p.min_support {
            break;
        }
        (k, l) = (pick(rng, &p.rows), pick(rng, &p.cols));
    }
    let density = rng.uniform(p.density.0, p.density.1);
    let need = p.min_support.clamp(1, k * l);
    let mut mask: Vec<bool> = (0..k * l).map(|_| rng.next_f64() < density).collect();
    let mut have = mask.iter().filter(|&&b| b).count();
    while have < need {
        let i = rng.below(k * l);
        if !mask[i] {
            mask[i] = true;
            have += 1;
        }
    }
    let mut used: Vec<f64> = Vec::new();
    let data = mask
        .iter()
        .map(|&on| {
            if !on {
                return 0.0;
            }
            loop {
                let v = support_value(rng);
                if !p.distinct || !used.contains(&v) {
                    used.push(v);
                    return v;
                }
            }
        })
        .collect();
    let eps = rng.uniform(p.epsilon.0, p.epsilon.1);
    FramedTile::new(Matrix::new(k, l, data).expect("nonempty"), eps).expect("valid random tile")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecParams {
    pub canvas: (usize, usize),
    pub classes: RangeInclusive<usize>,
    pub features: RangeInclusive<usize>,
    pub tiles: RangeInclusive<usize>,
    pub tile: TileParams,
}

impl Default for SpecParams {
    /// Specs whose tiles are unlikely to appear by chance in uniform noise:
    /// at least six support pixels and tolerances of at most 0.3.
    fn default() -> Self {
        Self {
            canvas: (16, 16),
            classes: 2..=4,
            features: 1..=3,
            tiles: 1..=3,
            tile: TileParams {
                rows: 2..=5,
                cols: 2..=5,
                density: (0.6, 1.0),
                epsilon: (0.1, 0.3),
                distinct: true,
                min_support: 6,
            },
        }
    }
}

pub fn random_feature(
    rng: &mut SampleRng,
    tiles: &RangeInclusive<usize>,
    p: &TileParams,
) -> Feature {
    let q = pick(rng, tiles);
    Feature::new((0..q).map(|_| random_tile(rng, p)).collect()).expect("nonempty feature")
}

pub fn random_spec(rng: &mut SampleRng, p: &SpecParams) -> ImageClassSpec {
    let classes = pick(rng, &p.classes);
    let images = (0..classes)
        .map(|c| {
            let r = pick(rng, &p.features);
            let features = (0..r)
                .map(|_| random_feature(rng, &p.tiles, &p.tile))
                .collect();
            ImageSpec::new(format!("class{c}"), features).expect("nonempty image")
        })
        .collect();
    ImageClassSpec::new(p.canvas, images).expect("tiles fit the canvas")
}

pub fn random_image(rng: &mut SampleRng, m: usize, n: usize) -> ImageMatrix {
    ImageMatrix::new(Matrix::from_fn(m, n, |_, _| rng.next_f64())).expect("draws lie in [0, 1)")
}

/// Pastes `tile` at a uniform legal offset, with optional noise on support.
pub fn paste_random(
    rng: &mut SampleRng,
    x: &mut ImageMatrix,
    tile: &FramedTile,
    noise: f64,
) -> Result<()> {
    let (k, l) = tile.shape();
    let offset = (rng.below(x.rows() - k + 1), rng.below(x.cols() - l + 1));
    paste_tile(x, tile, offset, PasteMode::Rectangle, noise, rng)
}

/// Largest noise amplitude keeping pasted tiles inside their frames, halved.
pub fn safe_noise(spec: &ImageClassSpec) -> f64 {
    let tiles = || spec.images().iter().flat_map(|i| i.tiles());
    let max_supp = tiles().map(FramedTile::support_size).max().unwrap_or(1);
    let min_eps = tiles()
        .map(FramedTile::epsilon)
        .fold(f64::INFINITY, f64::min);
    0.5 * min_eps / max_supp as f64
}
