//! Reference piecewise-linear detectors.
//!
//! `phi_tile` sums `max(0, eps - distance)` over every placement; it is
//! positive exactly when the tile is present. Features sum their tiles,
//! images take the minimum over features (`phi_image`) or the sum
//! (`phi_image_sum`, the single-hidden-stage variant).
//!
//! Summation order is fixed (row-major placements, then tile order, then
//! feature order) so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::model::{Feature, FramedTile, ImageClassSpec, ImageSpec};
use crate::tensor::ImageMatrix;

/// All top-left offsets of a `k x l` window inside an `m x n` canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionIndex {
    canvas: (usize, usize),
    window: (usize, usize),
}

impl RegionIndex {
    pub fn new(m: usize, n: usize, k: usize, l: usize) -> Result<Self> {
        if k == 0 || l == 0 || k > m || l > n {
            return Err(Error::dim(format!(
                "window {k}x{l} does not fit canvas {m}x{n}"
            )));
        }
        Ok(Self {
            canvas: (m, n),
            window: (k, l),
        })
    }

    pub fn rows(&self) -> usize {
        self.canvas.0 - self.window.0 + 1
    }

    pub fn cols(&self) -> usize {
        self.canvas.1 - self.window.1 + 1
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major enumeration of `(i, j)` offsets, 0-based.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols();
        (0..self.len()).map(move |p| (p / cols, p % cols))
    }

    pub fn placements(&self) -> Vec<(usize, usize)> {
        self.iter().collect()
    }
}

pub fn region_index(m: usize, n: usize, k: usize, l: usize) -> Result<RegionIndex> {
    RegionIndex::new(m, n, k, l)
}

/// Per-placement terms `max(0, eps - distance)`, row-major.
pub fn placement_scores(x: &ImageMatrix, tile: &FramedTile) -> Result<Vec<f64>> {
    let (k, l) = tile.shape();
    let region = RegionIndex::new(x.rows(), x.cols(), k, l)?;
    Ok(region
        .iter()
        .map(|(i, j)| (tile.epsilon() - tile.distance_at(x, i, j)).max(0.0))
        .collect())
}

pub fn phi_tile(x: &ImageMatrix, tile: &FramedTile) -> Result<f64> {
    Ok(placement_scores(x, tile)?.into_iter().sum())
}

pub fn phi_feature(x: &ImageMatrix, feature: &Feature) -> Result<f64> {
    let mut acc = 0.0;
    for tile in feature.tiles() {
        acc += phi_tile(x, tile)?;
    }
    Ok(acc)
}

pub fn phi_image(x: &ImageMatrix, image: &ImageSpec) -> Result<f64> {
    let mut best = f64::INFINITY;
    for feature in image.features() {
        best = best.min(phi_feature(x, feature)?);
    }
    Ok(best)
}

pub fn phi_image_sum(x: &ImageMatrix, image: &ImageSpec) -> Result<f64> {
    let mut acc = 0.0;
    for feature in image.features() {
        acc += phi_feature(x, feature)?;
    }
    Ok(acc)
}

/// `(phi_I1(x), ..., phi_Il(x))`: the target of the deep classifier.
pub fn phi_class_vector(x: &ImageMatrix, spec: &ImageClassSpec) -> Result<Vec<f64>> {
    spec.check_input(x)?;
    spec.images().iter().map(|img| phi_image(x, img)).collect()
}

/// `(phi'_I1(x), ..., phi'_Il(x))`: the target of the shallow classifier.
pub fn phi_sum_class_vector(x: &ImageMatrix, spec: &ImageClassSpec) -> Result<Vec<f64>> {
    spec.check_input(x)?;
    spec.images()
        .iter()
        .map(|img| phi_image_sum(x, img))
        .collect()
}
