//! `tilenet`: validate specs, compile classifiers, generate datasets,
//! evaluate weight files and run the invariant checks.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or spec error,
//! 3 I/O error. `TILENET_THREADS` sets the worker thread count.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use tilenet_core::compiler::{
    compile_classifier, compile_shallow_classifier, ArtifactKind, CompiledArtifact,
};
use tilenet_core::dataset::{
    gen_dataset_with_stats, ingest_tiles, Background, GenConfig, PasteMode,
};
use tilenet_core::io::dataset_file::{read_dataset, write_dataset};
use tilenet_core::io::idx::read_tile_source;
use tilenet_core::io::pgm::{read_pgm, write_pgm};
use tilenet_core::io::spec_file::{load_spec, save_spec};
use tilenet_core::io::weights::{load_weights, save_weights, WeightFile};
use tilenet_core::model::{Feature, ImageClassSpec, ImageSpec};
use tilenet_core::plf::{phi_class_vector, phi_sum_class_vector};
use tilenet_core::rng::SampleRng;
use tilenet_core::verify::{verify_spec, Level, VerifyOptions, ORACLE_TOLERANCE};
use tilenet_core::{Error, ImageMatrix};

#[derive(Parser)]
#[command(
    name = "tilenet",
    version,
    about = "Analytic CNN classifiers for framed-tile image classes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Deep,
    Shallow,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Quick,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum PasteArg {
    Rectangle,
    Support,
}

#[derive(Subcommand)]
enum Command {
    /// Check a spec file and print its size summary.
    Validate { spec: PathBuf },

    /// Build classifier weights for a spec.
    Compile {
        spec: PathBuf,
        #[arg(long, value_enum, default_value = "deep")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },

    /// Generate a labelled dataset.
    Gen {
        /// Spec file; omit when building the spec from --tiles.
        spec: Option<PathBuf>,
        /// Samples per class.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also reject samples containing any feature of another class.
        #[arg(long)]
        strict: bool,
        /// Per-pixel noise amplitude on pasted support pixels.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Constant background value instead of uniform noise.
        #[arg(long)]
        background: Option<f64>,
        #[arg(long, value_enum, default_value = "rectangle")]
        paste: PasteArg,
        #[arg(long, default_value_t = tilenet_core::dataset::DEFAULT_MAX_RETRIES)]
        max_retries: usize,
        /// Directory for one PGM per sample plus manifest.csv.
        #[arg(long)]
        export_pgm: Option<PathBuf>,
        /// IDX image file to cut tiles from (one single-feature class per label).
        #[arg(long, requires_all = ["tile_labels", "epsilon", "canvas"])]
        tiles: Option<PathBuf>,
        /// IDX label file paired with --tiles.
        #[arg(long)]
        tile_labels: Option<PathBuf>,
        /// Tiles per class.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Tolerance given to every ingested tile.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Canvas as MxN, for --tiles.
        #[arg(long)]
        canvas: Option<String>,
        /// Ingested pixels below this value leave the support.
        #[arg(long, default_value_t = 0.0)]
        threshold_zero: f64,
        /// Where to write the spec built from --tiles.
        #[arg(long)]
        emit_spec: Option<PathBuf>,
    },

    /// Score a dataset or a single image with a weight file.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        data: Option<PathBuf>,
        /// Single PGM image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Spec for --check-oracle.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Compare every score with the reference detectors.
        #[arg(long, requires = "spec")]
        check_oracle: bool,
        /// Print per-sample scores.
        #[arg(long)]
        dump: bool,
    },

    /// Run the invariant checks on a spec.
    Verify {
        spec: PathBuf,
        #[arg(long, value_enum, default_value = "quick")]
        level: LevelArg,
        /// Check this classifier instead of a freshly compiled one.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Check(String),
    Lib(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("TILENET_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: TILENET_THREADS must be a positive integer (got `{v}`)");
                return ExitCode::from(2);
            }
        }
    }
    let result = match cli.command {
        Command::Validate { spec } => validate(&spec),
        Command::Compile { spec, mode, out } => compile(&spec, mode, &out),
        Command::Gen {
            spec,
            n,
            seed,
            out,
            strict,
            noise,
            background,
            paste,
            max_retries,
            export_pgm,
            tiles,
            tile_labels,
            k,
            epsilon,
            canvas,
            threshold_zero,
            emit_spec,
        } => {
            let source = tiles.map(|images| TileArgs {
                images,
                labels: tile_labels.expect("required by clap"),
                k,
                epsilon: epsilon.expect("required by clap"),
                canvas: canvas.expect("required by clap"),
                threshold_zero,
                emit_spec,
            });
            let mut cfg = GenConfig::new(n, seed);
            cfg.strict = strict;
            cfg.noise_amplitude = noise;
            cfg.background = background.map_or(Background::UniformRandom, Background::Constant);
            cfg.paste_mode = match paste {
                PasteArg::Rectangle => PasteMode::Rectangle,
                PasteArg::Support => PasteMode::SupportOnly,
            };
            cfg.max_retries = max_retries;
            gen(spec.as_deref(), source, cfg, &out, export_pgm.as_deref())
        }
        Command::Eval {
            weights,
            data,
            image,
            spec,
            check_oracle,
            dump,
        } => eval(
            &weights,
            data.as_deref(),
            image.as_deref(),
            spec.as_deref(),
            check_oracle,
            dump,
        ),
        Command::Verify {
            spec,
            level,
            weights,
            seed,
        } => verify(&spec, level, weights.as_deref(), seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}

fn summary(spec: &ImageClassSpec) -> String {
    let cx = spec.total_complexity();
    format!(
        "{} classes, r_max={}, Σs={}, Σc={}",
        spec.len(),
        spec.max_features(),
        cx.s,
        cx.c
    )
}

fn validate(path: &Path) -> CmdResult {
    let spec = load_spec(path)?;
    println!("{}", summary(&spec));
    Ok(())
}

fn ok(flag: bool) -> &'static str {
    if flag {
        "ok"
    } else {
        "FAIL"
    }
}

fn report_text(a: &CompiledArtifact) -> String {
    let r = &a.report;
    let mut s = String::new();
    let _ = writeln!(s, "kind: {}", a.kind.as_str());
    let _ = writeln!(s, "spec_digest: {}", hex_digest(&a.spec_digest));
    let _ = writeln!(
        s,
        "conv_filters: {} (bound {}, construction {}) {}",
        r.conv_filters,
        r.bounds.filters,
        r.bounds.proof_filters,
        ok(r.filters_within_bound() && r.conv_filters == r.bounds.proof_filters)
    );
    let _ = writeln!(
        s,
        "fc_layers: {} (bound {}) {}",
        r.fc_layers,
        r.bounds.layers,
        ok(r.layers_match())
    );
    let _ = writeln!(
        s,
        "fc_neurons: {} (bound {}) {}",
        r.fc_neurons,
        r.bounds.neurons,
        ok(r.neurons_within_bound())
    );
    let _ = writeln!(
        s,
        "dense_weights: {} ({} nonzero)",
        r.dense_weights, r.dense_nonzeros
    );
    let _ = writeln!(s, "zero_weight_fraction: {:.6}", r.zero_weight_fraction);
    let _ = writeln!(
        s,
        "first_layer_zero_fraction: {:.6}",
        r.first_layer_zero_fraction
    );
    let _ = write!(
        s,
        "max_first_layer_row_nonzeros: {}",
        r.max_first_layer_row_nonzeros
    );
    s
}

fn hex_digest(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn compile(path: &Path, mode: Mode, out: &Path) -> CmdResult {
    let spec = load_spec(path)?;
    let art = match mode {
        Mode::Deep => compile_classifier(&spec)?,
        Mode::Shallow => compile_shallow_classifier(&spec)?,
    };
    save_weights(out, &WeightFile::from(&art))?;
    println!("{}", report_text(&art));
    println!("wrote {}", out.display());
    Ok(())
}

struct TileArgs {
    images: PathBuf,
    labels: PathBuf,
    k: usize,
    epsilon: f64,
    canvas: String,
    threshold_zero: f64,
    emit_spec: Option<PathBuf>,
}

fn parse_canvas(s: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("canvas must look like 40x40 (got `{s}`)"));
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        m.trim().parse().map_err(|_| bad())?,
        n.trim().parse().map_err(|_| bad())?,
    ))
}

/// One class per distinct label (ascending), each a single feature holding
/// `k` tiles picked at random from that label's pictures.
fn spec_from_tiles(args: &TileArgs, seed: u64) -> std::result::Result<ImageClassSpec, Failure> {
    let canvas = parse_canvas(&args.canvas)?;
    let source = read_tile_source(&args.images, &args.labels)?;
    let labels: BTreeSet<u8> = source.labels.iter().copied().collect();
    // Stream reserved for tile selection, disjoint from sample streams.
    let mut rng = SampleRng::new(seed, u64::MAX);
    let mut images = Vec::with_capacity(labels.len());
    for label in labels {
        let tiles = ingest_tiles(
            &source,
            label,
            args.k,
            args.epsilon,
            args.threshold_zero,
            &mut rng,
        )?;
        images.push(ImageSpec::new(
            label.to_string(),
            vec![Feature::new(tiles)?],
        )?);
    }
    let spec = ImageClassSpec::new(canvas, images)?;
    if let Some(path) = &args.emit_spec {
        save_spec(path, &spec)?;
    }
    Ok(spec)
}

fn gen(
    spec_path: Option<&Path>,
    tiles: Option<TileArgs>,
    cfg: GenConfig,
    out: &Path,
    export: Option<&Path>,
) -> CmdResult {
    let spec = match (spec_path, &tiles) {
        (Some(p), None) => load_spec(p)?,
        (None, Some(t)) => spec_from_tiles(t, cfg.seed)?,
        _ => return Err(Failure::Usage("give either a spec file or --tiles".into())),
    };
    let (data, stats) = gen_dataset_with_stats(&spec, &cfg)?;
    write_dataset(out, &data)?;
    if let Some(dir) = export {
        std::fs::create_dir_all(dir).map_err(|e| Error::File {
            path: dir.to_owned(),
            source: e,
        })?;
        let mut manifest = String::from("filename,label\n");
        for (i, (x, label)) in data.samples.iter().enumerate() {
            let name = format!("sample_{i:06}.pgm");
            write_pgm(dir.join(&name), x)?;
            let _ = writeln!(manifest, "{name},{label}");
        }
        let path = dir.join("manifest.csv");
        std::fs::write(&path, manifest).map_err(|e| Error::File { path, source: e })?;
    }
    println!(
        "{} samples ({} classes x {}), rejection rate {:.4}",
        data.len(),
        spec.len(),
        cfg.samples_per_class,
        stats.rejection_rate()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn fmt_scores(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.6}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn eval(
    weights: &Path,
    data: Option<&Path>,
    image: Option<&Path>,
    spec: Option<&Path>,
    check_oracle: bool,
    dump: bool,
) -> CmdResult {
    let w = load_weights(weights)?;
    let net = &w.network;
    let spec = spec.map(load_spec).transpose()?;
    let (inputs, labels): (Vec<ImageMatrix>, Option<Vec<usize>>) = match (data, image) {
        (Some(d), None) => {
            let d = read_dataset(d)?;
            let (x, y) = d.samples.into_iter().unzip();
            (x, Some(y))
        }
        (None, Some(p)) => (vec![ImageMatrix::new(read_pgm(p)?)?], None),
        _ => {
            return Err(Failure::Usage(
                "give exactly one of --data and --image".into(),
            ))
        }
    };
    if let Some(x) = inputs.first() {
        if x.shape() != net.input_shape() {
            return Err(Failure::Lib(Error::Dimension(format!(
                "data is {}x{} but the network expects {}x{}",
                x.rows(),
                x.cols(),
                net.input_shape().0,
                net.input_shape().1
            ))));
        }
    }
    let scores = inputs
        .par_iter()
        .map(|x| net.forward(x))
        .collect::<tilenet_core::Result<Vec<_>>>()?;
    let preds: Vec<usize> = scores
        .iter()
        .map(|s| tilenet_core::tensor::argmax(s).unwrap_or(0))
        .collect();
    let name = |j: usize| {
        w.class_names
            .get(j)
            .cloned()
            .unwrap_or_else(|| j.to_string())
    };

    if dump || labels.is_none() {
        for (i, (s, p)) in scores.iter().zip(&preds).enumerate() {
            let label = labels
                .as_ref()
                .map_or(String::from("-"), |l| l[i].to_string());
            println!(
                "{i} label={label} pred={p} ({}) scores=[{}]",
                name(*p),
                fmt_scores(s)
            );
        }
    }
    if let Some(labels) = &labels {
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        let n = labels.len();
        let acc = if n == 0 {
            1.0
        } else {
            correct as f64 / n as f64
        };
        println!("accuracy: {acc:.6} ({correct}/{n})");
    }
    if check_oracle {
        let spec = spec.expect("required by clap");
        if hex_digest(&spec.digest()) != hex_digest(&w.spec_digest) {
            eprintln!("warning: weight file was compiled from a different spec");
        }
        let shallow = w.kind == ArtifactKind::ClassifierShallow;
        let want = inputs
            .par_iter()
            .map(|x| {
                if shallow {
                    phi_sum_class_vector(x, &spec)
                } else {
                    phi_class_vector(x, &spec)
                }
            })
            .collect::<tilenet_core::Result<Vec<_>>>()?;
        let mut worst = (0.0f64, 0usize);
        for (i, (a, b)) in scores.iter().zip(&want).enumerate() {
            if a.len() != b.len() {
                return Err(Failure::Check(format!(
                    "sample {i}: {} scores, spec has {} classes",
                    a.len(),
                    b.len()
                )));
            }
            for (x, y) in a.iter().zip(b) {
                let d = (x - y).abs();
                if d > worst.0 || d.is_nan() {
                    worst = (d, i);
                }
            }
        }
        println!("oracle max deviation: {:.3e} (sample {})", worst.0, worst.1);
        if worst.0.is_nan() || worst.0 > ORACLE_TOLERANCE {
            return Err(Failure::Check(format!(
                "scores deviate from the reference detectors by {:.3e} > {ORACLE_TOLERANCE:e}",
                worst.0
            )));
        }
    }
    Ok(())
}

fn verify(path: &Path, level: LevelArg, weights: Option<&Path>, seed: u64) -> CmdResult {
    let spec = load_spec(path)?;
    let mut opts = VerifyOptions::new(match level {
        LevelArg::Quick => Level::Quick,
        LevelArg::Full => Level::Full,
    });
    opts.seed = seed;
    if let Some(p) = weights {
        let w = load_weights(p)?;
        if w.spec_digest != spec.digest() {
            eprintln!("warning: weight file was compiled from a different spec");
        }
        opts.classifier = Some(w.network);
    }
    println!("{}", summary(&spec));
    let report = verify_spec(&spec, &opts);
    for c in &report.checks {
        println!(
            "{} {:<18} {:>8.3} s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.elapsed.as_secs_f64(),
            c.detail
        );
    }
    if report.passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        Err(Failure::Check(names.join(", ")))
    }
}
