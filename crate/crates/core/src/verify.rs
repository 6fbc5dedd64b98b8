//! Runs the construction's invariants against one spec: compiled networks
//! agree with the reference detectors, detector signs agree with brute-force
//! membership, min networks are exact, sizes respect their bounds and the
//! deep classifier labels generated samples correctly.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::compiler::{
    compile_classifier, compile_feature_network, compile_min_network, compile_tile_network,
};
use crate::dataset::{gen_dataset, Background, GenConfig};
use crate::error::Result;
use crate::model::{
    contains_feature, contains_image, contains_tile, Feature, FramedTile, ImageClassSpec,
};
use crate::plf::{phi_class_vector, phi_feature, phi_image, phi_tile};
use crate::rng::SampleRng;
use crate::synth::{paste_random, random_image, safe_noise};
use crate::tensor::{ImageMatrix, Matrix, Network};

/// Agreement required between a network output and its reference value.
pub const ORACLE_TOLERANCE: f64 = 1e-6;
/// Agreement required from min networks.
pub const MIN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl Level {
    fn images(self) -> usize {
        match self {
            Level::Quick => 16,
            Level::Full => 100,
        }
    }

    fn min_vectors(self) -> usize {
        match self {
            Level::Quick => 200,
            Level::Full => 1000,
        }
    }

    fn samples_per_class(self) -> usize {
        match self {
            Level::Quick => 10,
            Level::Full => 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub level: Level,
    pub seed: u64,
    /// Classifier to test instead of a freshly compiled one.
    pub classifier: Option<Network>,
}

impl VerifyOptions {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            seed: 0,
            classifier: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct Probe {
    rng_seed: u64,
}

impl Probe {
    /// Half uniform noise, half noise with `tile` pasted; stream `s` seeds
    /// image `i`.
    fn images(
        &self,
        stream: u64,
        count: usize,
        canvas: (usize, usize),
        tile: &FramedTile,
    ) -> Vec<ImageMatrix> {
        (0..count)
            .map(|i| {
                let mut rng = SampleRng::new(self.rng_seed, (stream << 32) | i as u64);
                let mut x = random_image(&mut rng, canvas.0, canvas.1);
                if i % 2 == 1 {
                    paste_random(&mut rng, &mut x, tile, 0.0).expect("tile fits");
                }
                x
            })
            .collect()
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Largest `|a - b|` over paired evaluations, with the index where it occurs.
fn max_deviation(pairs: Vec<(f64, f64)>) -> (f64, usize) {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (a, b))| ((a - b).abs(), i))
        .fold(
            (0.0, 0),
            |acc, v| if v.0 > acc.0 || v.0.is_nan() { v } else { acc },
        )
}

fn tile_oracle(spec: &ImageClassSpec, probe: &Probe, level: Level) -> Result<(bool, String)> {
    let canvas = spec.canvas();
    let tiles: Vec<&FramedTile> = spec.images().iter().flat_map(|i| i.tiles()).collect();
    let mut worst = 0.0f64;
    let mut sparse_ok = true;
    let mut filters_ok = true;
    for (ti, tile) in tiles.iter().enumerate() {
        let art = compile_tile_network(tile, canvas.0, canvas.1)?;
        let first = &art.network.dense()[0];
        sparse_ok &= (0..first.out_dim()).all(|r| first.row_nonzeros(r) <= 2 * tile.support_size());
        let d = tile.distinct_values().len();
        filters_ok &=
            art.report.conv_filters == 4 * (d + 1) && 4 * (d + 1) <= 4 * (tile.support_size() + 1);
        let imgs = probe.images(ti as u64, level.images(), canvas, tile);
        let pairs = imgs
            .par_iter()
            .map(|x| Ok((art.network.forward(x)?[0], phi_tile(x, tile)?)))
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max(max_deviation(pairs).0);
    }
    Ok((
        worst <= ORACLE_TOLERANCE && sparse_ok && filters_ok,
        format!(
            "{} tiles, max deviation {worst:.3e}, row sparsity {}, filter counts {}",
            tiles.len(),
            if sparse_ok { "ok" } else { "VIOLATED" },
            if filters_ok { "ok" } else { "WRONG" }
        ),
    ))
}

fn feature_oracle(spec: &ImageClassSpec, probe: &Probe, level: Level) -> Result<(bool, String)> {
    let canvas = spec.canvas();
    let features: Vec<&Feature> = spec.images().iter().flat_map(|i| i.features()).collect();
    let mut worst = 0.0f64;
    let mut bound_ok = true;
    for (fi, f) in features.iter().enumerate() {
        let art = compile_feature_network(f, canvas.0, canvas.1)?;
        bound_ok &= art.report.filters_within_bound();
        let imgs = probe.images(
            1000 + fi as u64,
            level.images(),
            canvas,
            &f.tiles()[fi % f.tiles().len()],
        );
        let pairs = imgs
            .par_iter()
            .map(|x| Ok((art.network.forward(x)?[0], phi_feature(x, f)?)))
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max(max_deviation(pairs).0);
    }
    Ok((
        worst <= ORACLE_TOLERANCE && bound_ok,
        format!("{} features, max deviation {worst:.3e}", features.len()),
    ))
}

fn sign_equivalence(spec: &ImageClassSpec, probe: &Probe, level: Level) -> Result<(bool, String)> {
    let canvas = spec.canvas();
    let tiles: Vec<&FramedTile> = spec.images().iter().flat_map(|i| i.tiles()).collect();
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for (ti, tile) in tiles.iter().enumerate() {
        for x in probe.images(2000 + ti as u64, level.images(), canvas, tile) {
            checked += 1;
            mismatches += usize::from((phi_tile(&x, tile)? > 0.0) != contains_tile(&x, tile)?);
            for img in spec.images() {
                for f in img.features() {
                    mismatches +=
                        usize::from((phi_feature(&x, f)? > 0.0) != contains_feature(&x, f)?);
                }
                mismatches += usize::from((phi_image(&x, img)? > 0.0) != contains_image(&x, img)?);
            }
        }
    }
    Ok((
        mismatches == 0,
        format!("{checked} inputs, {mismatches} mismatches"),
    ))
}

fn min_exactness(spec: &ImageClassSpec, seed: u64, level: Level) -> Result<(bool, String)> {
    let mut arities: Vec<usize> = (1..=8).collect();
    arities.push(spec.max_features());
    arities.sort_unstable();
    arities.dedup();
    let mut worst = 0.0f64;
    let mut shape_ok = true;
    for &l in &arities {
        let net = compile_min_network(l)?;
        if l >= 2 {
            let p = crate::compiler::ceil_log2(l);
            shape_ok &=
                net.hidden_layers() == 2 * p - 1 && net.hidden_neurons() == 3 * (1 << p) - 4;
        }
        let mut rng = SampleRng::new(seed, 3000 + l as u64);
        for _ in 0..level.min_vectors() {
            let v: Vec<f64> = (0..l)
                .map(|_| {
                    if rng.below(4) == 0 {
                        0.0
                    } else {
                        rng.uniform(0.0, 10.0)
                    }
                })
                .collect();
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            worst = worst.max((net.evaluate(&v)? - min).abs());
        }
    }
    Ok((
        worst <= MIN_TOLERANCE && shape_ok,
        format!("arities {arities:?}, max deviation {worst:.3e}"),
    ))
}

fn bounds(spec: &ImageClassSpec, deep: &crate::compiler::CompiledArtifact) -> (bool, String) {
    let r = &deep.report;
    let distinct = spec
        .images()
        .iter()
        .flat_map(|i| i.tiles())
        .all(|t| t.distinct_values().len() == t.support_size());
    let filters_ok = if distinct {
        r.conv_filters == r.bounds.filters
    } else {
        r.filters_within_bound()
    };
    (
        filters_ok && r.neurons_within_bound() && r.layers_match(),
        format!(
            "filters {} (bound {}), fc_neurons {} (bound {}), fc_layers {} (bound {})",
            r.conv_filters,
            r.bounds.filters,
            r.fc_neurons,
            r.bounds.neurons,
            r.fc_layers,
            r.bounds.layers
        ),
    )
}

fn generated(spec: &ImageClassSpec, seed: u64, level: Level) -> Result<Vec<(ImageMatrix, usize)>> {
    let mut cfg = GenConfig::new(level.samples_per_class(), seed);
    cfg.noise_amplitude = safe_noise(spec);
    let mut samples = gen_dataset(spec, &cfg)?.samples;
    cfg.background = Background::Constant(0.0);
    cfg.noise_amplitude = 0.0;
    cfg.samples_per_class = 1;
    samples.extend(gen_dataset(spec, &cfg)?.samples);
    Ok(samples)
}

fn classifier_oracle(
    spec: &ImageClassSpec,
    net: &Network,
    samples: &[(ImageMatrix, usize)],
    seed: u64,
) -> Result<(bool, String)> {
    if net.input_shape() != spec.canvas() || net.output_dim() != spec.len() {
        return Ok((
            false,
            format!(
                "network shape {:?} -> {} does not match spec {:?} -> {}",
                net.input_shape(),
                net.output_dim(),
                spec.canvas(),
                spec.len()
            ),
        ));
    }
    let (m, n) = spec.canvas();
    let mut inputs: Vec<ImageMatrix> = samples.iter().map(|(x, _)| x.clone()).collect();
    let mut rng = SampleRng::new(seed, 4000);
    inputs.extend((0..8).map(|_| random_image(&mut rng, m, n)));
    inputs.push(ImageMatrix::zeros(m, n));
    inputs.push(ImageMatrix::new(Matrix::filled(m, n, 1.0))?);
    let rows = inputs
        .par_iter()
        .map(|x| {
            let got = net.forward(x)?;
            let want = phi_class_vector(x, spec)?;
            Ok(got.into_iter().zip(want).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst = (0.0f64, 0usize, 0usize);
    for (i, row) in rows.iter().enumerate() {
        for (j, (a, b)) in row.iter().enumerate() {
            let d = (a - b).abs();
            if d > worst.0 || d.is_nan() {
                worst = (d, i, j);
            }
        }
    }
    let passed = worst.0 <= ORACLE_TOLERANCE;
    let detail = if passed {
        format!("{} inputs, max deviation {:.3e}", inputs.len(), worst.0)
    } else {
        format!(
            "max deviation {:.3e} at input {} output {} over {} inputs",
            worst.0,
            worst.1,
            worst.2,
            inputs.len()
        )
    };
    Ok((passed, detail))
}

fn zero_error(net: &Network, samples: &[(ImageMatrix, usize)]) -> Result<(bool, String)> {
    let wrong = samples
        .par_iter()
        .map(|(x, label)| Ok(usize::from(net.classify(x)? != *label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    let acc = 1.0 - wrong as f64 / samples.len() as f64;
    Ok((
        wrong == 0,
        format!("{} samples, accuracy {acc}", samples.len()),
    ))
}

/// Every binary 4x4 image against a fixed 2x2 tile: detector sign, network
/// sign and brute-force membership must all agree.
pub fn binary_grid_check() -> Result<(bool, String)> {
    let tile = FramedTile::from_rows(&[[1.0, 1.0], [0.0, 1.0]], 1.0)?;
    let net = compile_tile_network(&tile, 4, 4)?.network;
    let mismatches = (0u32..1 << 16)
        .into_par_iter()
        .map(|bits| {
            let x = ImageMatrix::new(Matrix::from_fn(4, 4, |i, j| {
                f64::from((bits >> (4 * i + j)) & 1)
            }))?;
            let brute = (0..3).any(|i| {
                (0..3).any(|j| {
                    let d: f64 = tile
                        .support()
                        .iter()
                        .map(|&(u, v)| (x.get(i + u, j + v) - tile.values().get(u, v)).abs())
                        .sum();
                    d < tile.epsilon()
                })
            });
            let phi = phi_tile(&x, &tile)? > 0.0;
            let out = net.forward(&x)?[0] > 0.0;
            Ok(usize::from(phi != brute || out != brute))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok((
        mismatches == 0,
        format!("65536 images, {mismatches} mismatches"),
    ))
}

pub fn verify_spec(spec: &ImageClassSpec, opts: &VerifyOptions) -> VerifyReport {
    let level = opts.level;
    let probe = Probe {
        rng_seed: opts.seed,
    };
    let mut checks = vec![
        timed("tile oracle", || tile_oracle(spec, &probe, level)),
        timed("feature oracle", || feature_oracle(spec, &probe, level)),
        timed("sign equivalence", || sign_equivalence(spec, &probe, level)),
        timed("min network", || min_exactness(spec, opts.seed, level)),
    ];
    if level == Level::Full {
        checks.push(timed("binary grid", binary_grid_check));
    }

    let start = Instant::now();
    let deep = compile_classifier(spec);
    let compile_time = start.elapsed();
    match deep {
        Ok(deep) => {
            let (passed, detail) = bounds(spec, &deep);
            checks.push(CheckResult {
                name: "parameter bounds",
                passed,
                detail,
                elapsed: compile_time,
            });
            let net = opts.classifier.as_ref().unwrap_or(&deep.network);
            let start = Instant::now();
            match generated(spec, opts.seed, level) {
                Ok(samples) => {
                    let gen_time = start.elapsed();
                    let mut c = timed("classifier oracle", || {
                        classifier_oracle(spec, net, &samples, opts.seed)
                    });
                    c.elapsed += gen_time;
                    checks.push(c);
                    checks.push(timed("zero error", || zero_error(net, &samples)));
                }
                Err(e) => checks.push(CheckResult {
                    name: "classifier oracle",
                    passed: false,
                    detail: format!("sample generation failed: {e}"),
                    elapsed: start.elapsed(),
                }),
            }
        }
        Err(e) => checks.push(CheckResult {
            name: "parameter bounds",
            passed: false,
            detail: format!("compile failed: {e}"),
            elapsed: compile_time,
        }),
    }
    VerifyReport { checks }
}
