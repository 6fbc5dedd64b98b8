//! JSON spec documents.
//!
//! ```json
//! {
//!   "canvas": {"m": 16, "n": 16},
//!   "classes": [
//!     {"name": "a", "features": [
//!       {"tiles": [
//!         {"epsilon": 0.3, "values": [[0.1, 0.2], [0.3, 0.0]]},
//!         {"epsilon": 5.0, "file": "digit.pgm", "threshold_zero": 0.1}
//!       ]}
//!     ]}
//!   ]
//! }
//! ```
//!
//! A tile gives either inline `values` in `[0, 1]` or a PGM `file` (path
//! relative to the spec's directory, pixels mapped `v / 255`). With
//! `threshold_zero`, loaded pixels below the threshold become 0. Unknown
//! fields are rejected.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::pgm::read_pgm;
use super::{read_text, write_bytes};
use crate::error::{Error, Result};
use crate::model::{Feature, FramedTile, ImageClassSpec, ImageSpec};
use crate::tensor::Matrix;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    canvas: CanvasDoc,
    classes: Vec<ClassDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanvasDoc {
    m: usize,
    n: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassDoc {
    name: String,
    features: Vec<FeatureDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureDoc {
    tiles: Vec<TileDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TileDoc {
    epsilon: f64,
    values: Option<Vec<Vec<f64>>>,
    file: Option<String>,
    threshold_zero: Option<f64>,
}

fn load_tile(doc: &TileDoc, base: &Path) -> Result<FramedTile> {
    let values = match (&doc.values, &doc.file) {
        (Some(rows), None) => Matrix::from_rows(rows)?,
        (None, Some(file)) => read_pgm(base.join(file))?,
        _ => {
            return Err(Error::Spec(
                "exactly one of `values` and `file` is required".into(),
            ))
        }
    };
    let values = match doc.threshold_zero {
        Some(th) => values.map(|v| if v < th { 0.0 } else { v }),
        None => values,
    };
    FramedTile::new(values, doc.epsilon)
}

/// Parses a spec; tile files resolve against `base`.
pub fn parse_spec(text: &str, base: &Path) -> Result<ImageClassSpec> {
    let doc: SpecDoc =
        serde_json::from_str(text).map_err(|e| Error::Spec(format!("parse error: {e}")))?;
    let canvas = (doc.canvas.m, doc.canvas.n);
    let mut images = Vec::with_capacity(doc.classes.len());
    for (ci, class) in doc.classes.iter().enumerate() {
        let mut features = Vec::with_capacity(class.features.len());
        for (fi, feature) in class.features.iter().enumerate() {
            let mut tiles = Vec::with_capacity(feature.tiles.len());
            for (ti, tile) in feature.tiles.iter().enumerate() {
                let at = || format!("classes[{ci}] `{}` features[{fi}] tiles[{ti}]", class.name);
                let t = load_tile(tile, base).map_err(|e| match e {
                    e if e.is_io() => e,
                    e => Error::Spec(format!("{}: {}", at(), e)),
                })?;
                if !t.fits(canvas) {
                    let (k, l) = t.shape();
                    return Err(Error::Spec(format!(
                        "{}: tile exceeds canvas ({k}x{l} on {}x{})",
                        at(),
                        canvas.0,
                        canvas.1
                    )));
                }
                tiles.push(t);
            }
            features.push(Feature::new(tiles).map_err(|e| {
                Error::Spec(format!(
                    "classes[{ci}] `{}` features[{fi}]: {e}",
                    class.name
                ))
            })?);
        }
        images.push(
            ImageSpec::new(class.name.clone(), features)
                .map_err(|e| Error::Spec(format!("classes[{ci}]: {e}")))?,
        );
    }
    ImageClassSpec::new(canvas, images)
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<ImageClassSpec> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_spec(&text, base)
}

fn num(v: f64) -> String {
    serde_json::to_string(&v).expect("finite value")
}

/// Serializes with inline values, one tile row per line.
pub fn spec_to_json(spec: &ImageClassSpec) -> String {
    let (m, n) = spec.canvas();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{{\n  \"canvas\": {{\"m\": {m}, \"n\": {n}}},\n  \"classes\": ["
    );
    for (ci, img) in spec.images().iter().enumerate() {
        let name = serde_json::to_string(img.name()).expect("string");
        let _ = writeln!(s, "    {{\"name\": {name}, \"features\": [");
        for (fi, f) in img.features().iter().enumerate() {
            s.push_str("      {\"tiles\": [\n");
            for (ti, t) in f.tiles().iter().enumerate() {
                let _ = writeln!(
                    s,
                    "        {{\"epsilon\": {}, \"values\": [",
                    num(t.epsilon())
                );
                let rows = t.values().to_rows();
                for (ri, row) in rows.iter().enumerate() {
                    let cells: Vec<String> = row.iter().map(|&v| num(v)).collect();
                    let sep = if ri + 1 < rows.len() { "," } else { "" };
                    let _ = writeln!(s, "          [{}]{sep}", cells.join(", "));
                }
                let sep = if ti + 1 < f.tiles().len() { "," } else { "" };
                let _ = writeln!(s, "        ]}}{sep}");
            }
            let sep = if fi + 1 < img.features().len() {
                ","
            } else {
                ""
            };
            let _ = writeln!(s, "      ]}}{sep}");
        }
        let sep = if ci + 1 < spec.len() { "," } else { "" };
        let _ = writeln!(s, "    ]}}{sep}");
    }
    s.push_str("  ]\n}\n");
    s
}

pub fn save_spec(path: impl AsRef<Path>, spec: &ImageClassSpec) -> Result<()> {
    write_bytes(path.as_ref(), spec_to_json(spec).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::pgm::write_pgm;

    const TWO: &str = r#"{
      "canvas": {"m": 6, "n": 6},
      "classes": [
        {"name": "a", "features": [{"tiles": [{"epsilon": 0.3, "values": [[0.1, 0.2], [0.3, 0.4]]}]}]},
        {"name": "b", "features": [{"tiles": [{"epsilon": 0.3, "values": [[0.5, 0.6], [0.7, 0.8]]}]}]}
      ]
    }"#;

    fn err(text: &str) -> String {
        parse_spec(text, Path::new(".")).unwrap_err().to_string()
    }

    #[test]
    fn parses_and_round_trips() {
        let spec = parse_spec(TWO, Path::new(".")).unwrap();
        assert_eq!(spec.len(), 2);
        assert_eq!(spec.canvas(), (6, 6));
        let again = parse_spec(&spec_to_json(&spec), Path::new(".")).unwrap();
        assert_eq!(again, spec);
        assert_eq!(again.digest(), spec.digest());
    }

    #[test]
    fn diagnostics() {
        assert!(err(&TWO.replace("\"m\": 6", "\"m\": 1")).contains("tile exceeds canvas"));
        let e = err(&TWO.replacen("0.3", "0", 1));
        assert!(
            e.contains("epsilon must be positive") && e.contains("classes[0]"),
            "{e}"
        );
        assert!(err(&TWO.replace("\"b\"", "\"a\"")).contains("duplicate"));
        assert!(err(&TWO.replace("[[0.5, 0.6], [0.7, 0.8]]", "[[0, 0]]")).contains("empty support"));
        assert!(err(&TWO.replace("\"epsilon\": 0.3,", "\"eps\": 0.3,")).contains("line"));
        assert!(err("{").contains("parse error"));
        assert!(
            err(&TWO.replace("\"tiles\": [{", "\"tiles\": [], \"x\": [{")).contains("parse error")
        );
    }

    #[test]
    fn pgm_tiles() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(
            dir.path().join("t.pgm"),
            &Matrix::from_rows(&[[1.0, 0.02], [0.5, 0.0]]).unwrap(),
        )
        .unwrap();
        let text = r#"{"canvas": {"m": 4, "n": 4}, "classes": [{"name": "x", "features": [{"tiles": [
            {"epsilon": 1.0, "file": "t.pgm", "threshold_zero": 0.1}]}]}]}"#;
        std::fs::write(dir.path().join("s.json"), text).unwrap();
        let spec = load_spec(dir.path().join("s.json")).unwrap();
        let t = &spec.images()[0].features()[0].tiles()[0];
        assert_eq!(t.values().get(0, 0), 1.0);
        assert_eq!(t.values().get(0, 1), 0.0);
        assert_eq!(t.support_size(), 2);
        std::fs::remove_file(dir.path().join("t.pgm")).unwrap();
        assert!(load_spec(dir.path().join("s.json")).unwrap_err().is_io());
    }
}
