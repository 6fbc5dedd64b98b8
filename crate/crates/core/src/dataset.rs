//! Synthetic samples: random background, one pasted tile per feature of the
//! target image, then a rejection re-scan so every emitted label is sound.
//!
//! Pixels are rounded to `f32` before the re-scan. The dataset file stores
//! `f32`, so a loaded sample is bit-identical to the one that was checked.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{class_membership, contains_feature, FramedTile, ImageClassSpec, Membership};
use crate::rng::SampleRng;
use crate::tensor::{ImageMatrix, Matrix};

pub const GENERATOR_VERSION: u32 = 1;
pub const DEFAULT_MAX_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    /// I.i.d. uniform pixels.
    UniformRandom,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasteMode {
    /// Overwrite the whole tile window.
    Rectangle,
    /// Overwrite support pixels only; the background shows through elsewhere.
    SupportOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub samples_per_class: usize,
    pub seed: u64,
    pub paste_mode: PasteMode,
    /// Per-pixel noise amplitude `a` added on support pixels, `[-a, a]`.
    pub noise_amplitude: f64,
    pub background: Background,
    /// Also reject samples in which any feature of another image appears.
    pub strict: bool,
    pub max_retries: usize,
    /// Tiles pasted per feature.
    pub tiles_per_feature: usize,
}

impl GenConfig {
    pub fn new(samples_per_class: usize, seed: u64) -> Self {
        Self {
            samples_per_class,
            seed,
            paste_mode: PasteMode::Rectangle,
            noise_amplitude: 0.0,
            background: Background::UniformRandom,
            strict: false,
            max_retries: DEFAULT_MAX_RETRIES,
            tiles_per_feature: 1,
        }
    }

    pub fn validate(&self, spec: &ImageClassSpec) -> Result<()> {
        if let Background::Constant(v) = self.background {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidValue(format!(
                    "background value {v} lies outside [0, 1]"
                )));
            }
        }
        if self.max_retries == 0 || self.tiles_per_feature == 0 {
            return Err(Error::InvalidValue(
                "retry budget and tiles per feature must be positive".into(),
            ));
        }
        if spec.len() > 256 {
            return Err(Error::Spec(format!(
                "{} images do not fit one-byte labels",
                spec.len()
            )));
        }
        let a = self.noise_amplitude;
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "noise amplitude must be nonnegative (got {a})"
            )));
        }
        if a > 0.0 {
            let tiles = || spec.images().iter().flat_map(|i| i.tiles());
            let max_supp = tiles().map(FramedTile::support_size).max().unwrap_or(0);
            let min_eps = tiles()
                .map(FramedTile::epsilon)
                .fold(f64::INFINITY, f64::min);
            if a * max_supp as f64 >= min_eps {
                return Err(Error::InvalidValue(format!(
                    "noise amplitude {a} times max support {max_supp} must stay below the smallest epsilon {min_eps}"
                )));
            }
        }
        Ok(())
    }
}

pub fn gen_background(
    m: usize,
    n: usize,
    background: Background,
    rng: &mut SampleRng,
) -> Result<ImageMatrix> {
    match background {
        Background::UniformRandom => {
            Ok(
                ImageMatrix::new(Matrix::from_fn(m, n, |_, _| rng.next_f64()))
                    .expect("draws lie in [0, 1)"),
            )
        }
        Background::Constant(v) => ImageMatrix::constant(m, n, v),
    }
}

/// Pastes `tile` with its top-left corner at `offset`. Noise draws happen
/// only when `noise_amplitude > 0`, one per support pixel in row-major order.
pub fn paste_tile(
    x: &mut ImageMatrix,
    tile: &FramedTile,
    offset: (usize, usize),
    mode: PasteMode,
    noise_amplitude: f64,
    rng: &mut SampleRng,
) -> Result<()> {
    let (k, l) = tile.shape();
    let (i, j) = offset;
    if i + k > x.rows() || j + l > x.cols() {
        return Err(Error::dim(format!(
            "tile {k}x{l} at ({i}, {j}) leaves canvas {}x{}",
            x.rows(),
            x.cols()
        )));
    }
    let t = tile.values();
    for u in 0..k {
        for v in 0..l {
            let value = t.get(u, v);
            if value == 0.0 {
                if mode == PasteMode::Rectangle {
                    x.set_clamped(i + u, j + v, 0.0);
                }
                continue;
            }
            let noise = if noise_amplitude > 0.0 {
                rng.uniform(-noise_amplitude, noise_amplitude)
            } else {
                0.0
            };
            x.set_clamped(i + u, j + v, value + noise);
        }
    }
    Ok(())
}

/// Where each tile of an accepted sample went.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub feature: usize,
    pub tile: usize,
    pub offset: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub image: ImageMatrix,
    /// Candidates drawn, including the accepted one.
    pub attempts: usize,
    pub placements: Vec<Placement>,
}

fn quantize(x: ImageMatrix) -> ImageMatrix {
    let m = x.into_matrix().map(|v| f64::from(v as f32));
    ImageMatrix::new(m).expect("f32 rounding keeps [0, 1]")
}

/// Reason a candidate was rejected, or `None` if it is acceptable.
fn rejection(
    x: &ImageMatrix,
    spec: &ImageClassSpec,
    class: usize,
    strict: bool,
) -> Result<Option<String>> {
    let names = spec.names();
    match class_membership(x, spec)? {
        Membership::Label(j) if j == class => {}
        Membership::Label(j) => return Ok(Some(format!("sample matched `{}` instead", names[j]))),
        Membership::NotInAnyClass => return Ok(Some("pasted image not detected".into())),
        Membership::Ambiguous(hits) => {
            let rival = hits.iter().find(|&&h| h != class).copied().unwrap_or(class);
            return Ok(Some(format!("image `{}` also present", names[rival])));
        }
    }
    if strict {
        for (k, image) in spec.images().iter().enumerate() {
            if k == class {
                continue;
            }
            for (fi, feature) in image.features().iter().enumerate() {
                if contains_feature(x, feature)? {
                    return Ok(Some(format!(
                        "feature {fi} of image `{}` present",
                        names[k]
                    )));
                }
            }
        }
    }
    Ok(None)
}

pub fn gen_sample_traced(
    spec: &ImageClassSpec,
    class: usize,
    config: &GenConfig,
    rng: &mut SampleRng,
) -> Result<SampleTrace> {
    let image = spec
        .images()
        .get(class)
        .ok_or_else(|| Error::InvalidValue(format!("class index {class} out of range")))?;
    let (m, n) = spec.canvas();
    let mut last_reason = String::new();
    for attempt in 1..=config.max_retries {
        let mut x = gen_background(m, n, config.background, rng)?;
        let mut placements = Vec::new();
        for (fi, feature) in image.features().iter().enumerate() {
            for _ in 0..config.tiles_per_feature {
                let ti = rng.below(feature.tiles().len());
                let tile = &feature.tiles()[ti];
                let (k, l) = tile.shape();
                let offset = (rng.below(m - k + 1), rng.below(n - l + 1));
                paste_tile(
                    &mut x,
                    tile,
                    offset,
                    config.paste_mode,
                    config.noise_amplitude,
                    rng,
                )?;
                placements.push(Placement {
                    feature: fi,
                    tile: ti,
                    offset,
                });
            }
        }
        let x = quantize(x);
        match rejection(&x, spec, class, config.strict)? {
            None => {
                return Ok(SampleTrace {
                    image: x,
                    attempts: attempt,
                    placements,
                })
            }
            Some(reason) => last_reason = reason,
        }
    }
    Err(Error::RetryBudget {
        class: image.name().to_owned(),
        retries: config.max_retries,
        reason: last_reason,
    })
}

pub fn gen_sample(
    spec: &ImageClassSpec,
    class: usize,
    config: &GenConfig,
    rng: &mut SampleRng,
) -> Result<ImageMatrix> {
    Ok(gen_sample_traced(spec, class, config, rng)?.image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub canvas: (usize, usize),
    /// `(image, 0-based label)`, class-major.
    pub samples: Vec<(ImageMatrix, usize)>,
    pub spec_digest: [u8; 32],
    pub seed: u64,
    pub generator_version: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenStats {
    pub samples: usize,
    pub attempts: usize,
}

impl GenStats {
    /// Fraction of drawn candidates that were rejected.
    pub fn rejection_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            1.0 - self.samples as f64 / self.attempts as f64
        }
    }
}

/// Generates `samples_per_class` samples per image, in parallel. Sample
/// `(class, index)` always uses its own stream, so output is independent of
/// scheduling.
pub fn gen_dataset_with_stats(
    spec: &ImageClassSpec,
    config: &GenConfig,
) -> Result<(Dataset, GenStats)> {
    config.validate(spec)?;
    let jobs: Vec<(usize, usize)> = (0..spec.len())
        .flat_map(|c| (0..config.samples_per_class).map(move |i| (c, i)))
        .collect();
    let traces = jobs
        .par_iter()
        .map(|&(c, i)| {
            let mut rng = SampleRng::for_sample(config.seed, c, i);
            gen_sample_traced(spec, c, config, &mut rng).map(|t| (t, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let attempts = traces.iter().map(|(t, _)| t.attempts).sum();
    let samples: Vec<(ImageMatrix, usize)> =
        traces.into_iter().map(|(t, c)| (t.image, c)).collect();
    let stats = GenStats {
        samples: samples.len(),
        attempts,
    };
    Ok((
        Dataset {
            canvas: spec.canvas(),
            samples,
            spec_digest: spec.digest(),
            seed: config.seed,
            generator_version: GENERATOR_VERSION,
        },
        stats,
    ))
}

pub fn gen_dataset(spec: &ImageClassSpec, config: &GenConfig) -> Result<Dataset> {
    Ok(gen_dataset_with_stats(spec, config)?.0)
}

/// Labelled grayscale pictures to cut tiles from, values already in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSource {
    pub images: Vec<Matrix>,
    pub labels: Vec<u8>,
}

impl TileSource {
    pub fn new(images: Vec<Matrix>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }
}

/// Picks `k` distinct pictures with `label` uniformly at random and frames
/// each with `epsilon`. Pixels below `threshold_zero` are cleared first.
pub fn ingest_tiles(
    source: &TileSource,
    label: u8,
    k: usize,
    epsilon: f64,
    threshold_zero: f64,
    rng: &mut SampleRng,
) -> Result<Vec<FramedTile>> {
    let candidates: Vec<usize> = (0..source.labels.len())
        .filter(|&i| source.labels[i] == label)
        .collect();
    if candidates.len() < k {
        return Err(Error::InvalidValue(format!(
            "label {label} has {} pictures, {k} requested",
            candidates.len()
        )));
    }
    rng.choose_distinct(candidates.len(), k)
        .into_iter()
        .map(|c| {
            let idx = candidates[c];
            let values = source.images[idx].map(|v| if v < threshold_zero { 0.0 } else { v });
            FramedTile::new(values, epsilon)
                .map_err(|e| Error::InvalidValue(format!("picture {idx} (label {label}): {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{contains_tile, tile_distance, Feature, ImageSpec};

    fn tile(rows: &[&[f64]], eps: f64) -> FramedTile {
        FramedTile::from_rows(rows, eps).unwrap()
    }

    fn spec(images: Vec<(&str, Vec<Vec<FramedTile>>)>, canvas: (usize, usize)) -> ImageClassSpec {
        let images = images
            .into_iter()
            .map(|(name, feats)| {
                ImageSpec::new(
                    name,
                    feats
                        .into_iter()
                        .map(|t| Feature::new(t).unwrap())
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        ImageClassSpec::new(canvas, images).unwrap()
    }

    #[test]
    fn backgrounds() {
        let mut rng = SampleRng::new(1, 0);
        let z = gen_background(3, 4, Background::Constant(0.0), &mut rng).unwrap();
        assert_eq!(z, ImageMatrix::zeros(3, 4));
        let a =
            gen_background(40, 40, Background::UniformRandom, &mut SampleRng::new(9, 0)).unwrap();
        let b =
            gen_background(40, 40, Background::UniformRandom, &mut SampleRng::new(9, 0)).unwrap();
        assert_eq!(a, b);
        let mean = a.as_slice().iter().sum::<f64>() / 1600.0;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    #[test]
    fn paste_modes() {
        let t = tile(&[&[0.9, 0.9, 0.9], &[0.9, 0.0, 0.9], &[0.9, 0.9, 0.9]], 0.5);
        let mut rng = SampleRng::new(0, 0);
        let mut x = ImageMatrix::constant(5, 5, 0.4).unwrap();
        paste_tile(&mut x, &t, (1, 1), PasteMode::Rectangle, 0.0, &mut rng).unwrap();
        assert_eq!(x.window(1, 1, 3, 3).unwrap(), *t.values());
        assert_eq!(
            tile_distance(&t, &x.window(1, 1, 3, 3).unwrap()).unwrap(),
            0.0
        );

        let mut y = ImageMatrix::constant(5, 5, 0.4).unwrap();
        paste_tile(&mut y, &t, (1, 1), PasteMode::SupportOnly, 0.0, &mut rng).unwrap();
        assert_eq!(y.get(2, 2), 0.4);
        assert_eq!(y.get(1, 1), 0.9);

        assert!(paste_tile(&mut y, &t, (3, 0), PasteMode::Rectangle, 0.0, &mut rng).is_err());
    }

    #[test]
    fn noisy_paste_stays_inside_frame() {
        let t = tile(&[&[0.5, 0.6], &[0.7, 0.8]], 0.2);
        let a = 0.049;
        for s in 0..200 {
            let mut rng = SampleRng::new(s, 0);
            let mut x = gen_background(6, 6, Background::UniformRandom, &mut rng).unwrap();
            paste_tile(&mut x, &t, (2, 3), PasteMode::Rectangle, a, &mut rng).unwrap();
            let d = tile_distance(&t, &x.window(2, 3, 2, 2).unwrap()).unwrap();
            assert!(d <= 4.0 * a && d < t.epsilon());
            assert!(contains_tile(&x, &t).unwrap());
        }
    }

    #[test]
    fn noise_invariant_is_enforced() {
        let s = spec(vec![("a", vec![vec![tile(&[&[0.5, 0.6]], 0.2)]])], (4, 4));
        let mut cfg = GenConfig::new(1, 0);
        cfg.noise_amplitude = 0.1;
        assert!(cfg.validate(&s).is_err());
        cfg.noise_amplitude = 0.09;
        assert!(cfg.validate(&s).is_ok());
    }

    #[test]
    fn blank_background_first_try() {
        let s = spec(
            vec![
                ("a", vec![vec![tile(&[&[0.9, 0.8]], 0.3)]]),
                ("b", vec![vec![tile(&[&[0.2], &[0.4]], 0.1)]]),
            ],
            (6, 6),
        );
        let mut cfg = GenConfig::new(1, 3);
        cfg.background = Background::Constant(0.0);
        for class in 0..2 {
            let mut rng = SampleRng::for_sample(3, class, 0);
            let t = gen_sample_traced(&s, class, &cfg, &mut rng).unwrap();
            assert_eq!(t.attempts, 1);
            assert_eq!(
                class_membership(&t.image, &s).unwrap(),
                Membership::Label(class)
            );
        }
    }

    #[test]
    fn shared_tile_exhausts_strict_budget() {
        let shared = tile(&[&[0.7, 0.3]], 0.2);
        let s = spec(
            vec![
                (
                    "a",
                    vec![vec![shared.clone()], vec![tile(&[&[0.1], &[0.9]], 0.2)]],
                ),
                ("b", vec![vec![shared]]),
            ],
            (6, 6),
        );
        let mut cfg = GenConfig::new(1, 0);
        cfg.strict = true;
        cfg.max_retries = 20;
        let mut rng = SampleRng::new(0, 0);
        let err = gen_sample(&s, 1, &cfg, &mut rng).unwrap_err();
        match err {
            Error::RetryBudget {
                class,
                retries,
                reason,
            } => {
                assert_eq!(class, "b");
                assert_eq!(retries, 20);
                assert!(reason.contains("`a`"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_is_deterministic_and_sound() {
        let s = spec(
            vec![
                ("a", vec![vec![tile(&[&[0.9, 0.8, 0.7]], 0.2)]]),
                (
                    "b",
                    vec![
                        vec![tile(&[&[0.1, 0.5], &[0.3, 0.6]], 0.2)],
                        vec![tile(&[&[0.95]], 0.02)],
                    ],
                ),
            ],
            (8, 8),
        );
        let cfg = GenConfig::new(30, 11);
        let (d1, stats) = gen_dataset_with_stats(&s, &cfg).unwrap();
        let d2 = gen_dataset(&s, &cfg).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 60);
        assert!(stats.attempts >= 60);
        for (x, label) in &d1.samples {
            assert_eq!(class_membership(x, &s).unwrap(), Membership::Label(*label));
            assert!(x.as_slice().iter().all(|&v| f64::from(v as f32) == v));
        }
        let other = gen_dataset(&s, &GenConfig::new(30, 12)).unwrap();
        assert_ne!(d1.samples, other.samples);
    }

    #[test]
    fn offsets_cover_the_region_uniformly() {
        let s = spec(
            vec![("a", vec![vec![tile(&[&[0.9, 0.9], &[0.9, 0.9]], 0.1)]])],
            (5, 5),
        );
        let mut cfg = GenConfig::new(1, 0);
        cfg.background = Background::Constant(0.0);
        let mut counts = [0usize; 16];
        let total = 10_000;
        for i in 0..total {
            let mut rng = SampleRng::for_sample(42, 0, i);
            let t = gen_sample_traced(&s, 0, &cfg, &mut rng).unwrap();
            let (a, b) = t.placements[0].offset;
            counts[a * 4 + b] += 1;
        }
        // Chi-squared with 15 degrees of freedom; 37.7 is the 0.999 quantile.
        let expected = total as f64 / 16.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 37.7, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn ingestion() {
        let pic = |v: f64| Matrix::filled(3, 3, v);
        let source = TileSource::new(
            vec![pic(1.0), pic(0.5), pic(0.0), pic(0.2)],
            vec![1, 1, 2, 1],
        )
        .unwrap();
        let mut rng = SampleRng::new(0, 0);
        let tiles = ingest_tiles(&source, 1, 2, 0.5, 0.0, &mut rng).unwrap();
        assert_eq!(tiles.len(), 2);
        assert!(ingest_tiles(&source, 1, 4, 0.5, 0.0, &mut rng).is_err());
        assert!(ingest_tiles(&source, 7, 1, 0.5, 0.0, &mut rng).is_err());
        let err = ingest_tiles(&source, 2, 1, 0.5, 0.0, &mut rng).unwrap_err();
        assert!(err.to_string().contains("empty support"));
        // A threshold above every pixel empties the support as well.
        assert!(ingest_tiles(&source, 1, 3, 0.5, 1.1, &mut rng).is_err());
        let one = ingest_tiles(
            &TileSource::new(vec![pic(1.0)], vec![0]).unwrap(),
            0,
            1,
            0.5,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(one[0].values().get(0, 0), 1.0);
    }
}
