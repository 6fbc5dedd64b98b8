//! Declarative image classes: framed tiles, features, images.
//!
//! Membership is decided by brute-force scanning of every placement. These
//! predicates are the ground truth for verification and for the dataset
//! generator's rejection step.
//!
//! Conventions:
//! - a patch contains a tile when its support distance is strictly below
//!   epsilon;
//! - a feature is present when any of its tiles is present (plain union);
//! - an image is present when all of its features are present.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ImageMatrix, Matrix};

/// Coordinates of the nonzero entries, row-major, 0-based.
pub fn support(t: &Matrix) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            if t.get(i, j) != 0.0 {
                out.push((i, j));
            }
        }
    }
    out
}

/// A template `t` with tolerance `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramedTile {
    values: Matrix,
    epsilon: f64,
    support: Vec<(usize, usize)>,
}

impl FramedTile {
    pub fn new(values: Matrix, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "epsilon must be positive (got {epsilon})"
            )));
        }
        let values = ImageMatrix::new(values)?.into_matrix();
        let support = support(&values);
        if support.is_empty() {
            return Err(Error::InvalidValue("tile has empty support".into()));
        }
        Ok(Self {
            values,
            epsilon,
            support,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], epsilon: f64) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, epsilon)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `(k, l)`: rows and columns of the template.
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn support(&self) -> &[(usize, usize)] {
        &self.support
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    /// Distinct nonzero template values in order of first row-major
    /// appearance.
    pub fn distinct_values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for &(u, v) in &self.support {
            let value = self.values.get(u, v);
            if !out.iter().any(|s| s.to_bits() == value.to_bits()) {
                out.push(value);
            }
        }
        out
    }

    pub fn fits(&self, canvas: (usize, usize)) -> bool {
        let (k, l) = self.shape();
        k <= canvas.0 && l <= canvas.1
    }

    /// Support distance of the window of `x` anchored at `(i, j)`.
    /// The caller guarantees the window is in bounds.
    #[inline]
    pub(crate) fn distance_at(&self, x: &Matrix, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for &(u, v) in &self.support {
            acc += (x.get(i + u, j + v) - self.values.get(u, v)).abs();
        }
        acc
    }

    pub(crate) fn check_canvas(&self, canvas: (usize, usize)) -> Result<()> {
        if self.fits(canvas) {
            Ok(())
        } else {
            let (k, l) = self.shape();
            Err(Error::dim(format!(
                "tile {k}x{l} exceeds canvas {}x{}",
                canvas.0, canvas.1
            )))
        }
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        let (k, l) = self.shape();
        h.update((k as u64).to_le_bytes());
        h.update((l as u64).to_le_bytes());
        h.update(self.epsilon.to_bits().to_le_bytes());
        for v in self.values.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"tilenet/tile/v1");
        self.hash_into(&mut h);
        h.finalize().into()
    }
}

/// Sum over the support of `|patch - t|`. Entries outside the support are
/// ignored.
pub fn tile_distance(tile: &FramedTile, patch: &Matrix) -> Result<f64> {
    if patch.shape() != tile.shape() {
        return Err(Error::dim(format!(
            "patch {:?} does not match tile {:?}",
            patch.shape(),
            tile.shape()
        )));
    }
    Ok(tile.distance_at(patch, 0, 0))
}

/// True iff some placement of the tile lies strictly within epsilon.
pub fn contains_tile(x: &ImageMatrix, tile: &FramedTile) -> Result<bool> {
    Ok(find_tile(x, tile)?.is_some())
}

/// First placement (row-major) at which the tile is present.
pub fn find_tile(x: &ImageMatrix, tile: &FramedTile) -> Result<Option<(usize, usize)>> {
    tile.check_canvas(x.shape())?;
    let (k, l) = tile.shape();
    for i in 0..=x.rows() - k {
        for j in 0..=x.cols() - l {
            if tile.distance_at(x, i, j) < tile.epsilon() {
                return Ok(Some((i, j)));
            }
        }
    }
    Ok(None)
}

/// `s` (tile count) and `c` (total support size) of a feature or image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Complexity {
    pub s: usize,
    pub c: usize,
}

impl std::ops::Add for Complexity {
    type Output = Complexity;

    fn add(self, rhs: Complexity) -> Complexity {
        Complexity {
            s: self.s + rhs.s,
            c: self.c + rhs.c,
        }
    }
}

/// A nonempty list of framed tiles; present when any tile is present.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    tiles: Vec<FramedTile>,
}

impl Feature {
    pub fn new(tiles: Vec<FramedTile>) -> Result<Self> {
        if tiles.is_empty() {
            return Err(Error::Spec("feature has no tiles".into()));
        }
        Ok(Self { tiles })
    }

    pub fn tiles(&self) -> &[FramedTile] {
        &self.tiles
    }

    pub fn complexity(&self) -> Complexity {
        Complexity {
            s: self.tiles.len(),
            c: self.tiles.iter().map(FramedTile::support_size).sum(),
        }
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        h.update((self.tiles.len() as u64).to_le_bytes());
        for t in &self.tiles {
            t.hash_into(h);
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"tilenet/feature/v1");
        self.hash_into(&mut h);
        h.finalize().into()
    }
}

pub fn contains_feature(x: &ImageMatrix, feature: &Feature) -> Result<bool> {
    for tile in feature.tiles() {
        if contains_tile(x, tile)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// A named, nonempty list of features; present when all are present.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSpec {
    name: String,
    features: Vec<Feature>,
}

impl ImageSpec {
    pub fn new(name: impl Into<String>, features: Vec<Feature>) -> Result<Self> {
        let name = name.into();
        if features.is_empty() {
            return Err(Error::Spec(format!("image `{name}` has no features")));
        }
        Ok(Self { name, features })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn tiles(&self) -> impl Iterator<Item = &FramedTile> {
        self.features.iter().flat_map(|f| f.tiles().iter())
    }

    pub fn complexity(&self) -> Complexity {
        self.features
            .iter()
            .map(Feature::complexity)
            .fold(Complexity::default(), |a, b| a + b)
    }
}

pub fn contains_image(x: &ImageMatrix, image: &ImageSpec) -> Result<bool> {
    for feature in image.features() {
        if !contains_feature(x, feature)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Outcome of classifying an input against an image class by brute force.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Membership {
    /// Exactly one image is present (0-based index).
    Label(usize),
    NotInAnyClass,
    /// Two or more images are present; such inputs lie outside the class.
    Ambiguous(Vec<usize>),
}

/// A canvas size plus a nonempty list of uniquely named images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageClassSpec {
    canvas: (usize, usize),
    images: Vec<ImageSpec>,
}

impl ImageClassSpec {
    pub fn new(canvas: (usize, usize), images: Vec<ImageSpec>) -> Result<Self> {
        if canvas.0 == 0 || canvas.1 == 0 {
            return Err(Error::Spec(format!(
                "canvas {}x{} is empty",
                canvas.0, canvas.1
            )));
        }
        if images.is_empty() {
            return Err(Error::Spec("image class has no images".into()));
        }
        for (a, img) in images.iter().enumerate() {
            if images[..a].iter().any(|o| o.name() == img.name()) {
                return Err(Error::Spec(format!(
                    "duplicate image name `{}`",
                    img.name()
                )));
            }
            for (fi, feature) in img.features().iter().enumerate() {
                for (ti, tile) in feature.tiles().iter().enumerate() {
                    if !tile.fits(canvas) {
                        let (k, l) = tile.shape();
                        return Err(Error::Spec(format!(
                            "image `{}` feature {fi} tile {ti}: tile {k}x{l} exceeds canvas {}x{}",
                            img.name(),
                            canvas.0,
                            canvas.1
                        )));
                    }
                }
            }
        }
        Ok(Self { canvas, images })
    }

    pub fn canvas(&self) -> (usize, usize) {
        self.canvas
    }

    pub fn images(&self) -> &[ImageSpec] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.images.iter().map(|i| i.name().to_owned()).collect()
    }

    /// Largest feature count over all images.
    pub fn max_features(&self) -> usize {
        self.images
            .iter()
            .map(|i| i.features().len())
            .max()
            .unwrap_or(0)
    }

    /// Summed complexity over all images.
    pub fn total_complexity(&self) -> Complexity {
        self.images
            .iter()
            .map(ImageSpec::complexity)
            .fold(Complexity::default(), |a, b| a + b)
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"tilenet/spec/v1");
        h.update((self.canvas.0 as u64).to_le_bytes());
        h.update((self.canvas.1 as u64).to_le_bytes());
        h.update((self.images.len() as u64).to_le_bytes());
        for img in &self.images {
            h.update((img.name().len() as u64).to_le_bytes());
            h.update(img.name().as_bytes());
            h.update((img.features().len() as u64).to_le_bytes());
            for f in img.features() {
                f.hash_into(&mut h);
            }
        }
        h.finalize().into()
    }

    pub(crate) fn check_input(&self, x: &ImageMatrix) -> Result<()> {
        if x.shape() != self.canvas {
            return Err(Error::dim(format!(
                "input {}x{} does not match canvas {}x{}",
                x.rows(),
                x.cols(),
                self.canvas.0,
                self.canvas.1
            )));
        }
        Ok(())
    }
}

/// Indices of every image present in `x`.
pub fn present_images(x: &ImageMatrix, spec: &ImageClassSpec) -> Result<Vec<usize>> {
    spec.check_input(x)?;
    let mut hits = Vec::new();
    for (j, image) in spec.images().iter().enumerate() {
        if contains_image(x, image)? {
            hits.push(j);
        }
    }
    Ok(hits)
}

pub fn class_membership(x: &ImageMatrix, spec: &ImageClassSpec) -> Result<Membership> {
    let hits = present_images(x, spec)?;
    Ok(match hits.len() {
        0 => Membership::NotInAnyClass,
        1 => Membership::Label(hits[0]),
        _ => Membership::Ambiguous(hits),
    })
}
