//! JSON weight files. Floats use the shortest representation that parses
//! back to the same `f64`, so a loaded network reproduces outputs
//! bit-for-bit. Dense rows are sparse `[[column, weight], ...]` lists, one
//! row per line; omitted entries are zero.
//!
//! ```text
//! {
//!   "format": "tilenet-weights",
//!   "format_version": 1,
//!   "kind": "tile" | "feature" | "classifier_deep" | "classifier_shallow",
//!   "spec_digest": "<sha-256 hex>",
//!   "compiler_version": "<semver>",
//!   "class_names": [...],
//!   "input_shape": [m, n],
//!   "conv": {"kernel_shape": [kh, kw], "filters": [{"bias": b, "kernel": [[...], ...]}, ...]},
//!   "dense": [{"in_dim": i, "out_dim": o, "biases": [...], "rows": [[[c, w], ...], ...]}, ...]
//! }
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{read_text, write_bytes};
use crate::compiler::{ArtifactKind, CompiledArtifact, COMPILER_VERSION};
use crate::error::{Error, Result};
use crate::tensor::{ConvFilter, ConvLayer, DenseLayer, Matrix, Network};

pub const FORMAT_NAME: &str = "tilenet-weights";
pub const FORMAT_VERSION: u32 = 1;
const WHAT: &str = "weight file";

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub network: Network,
    pub kind: ArtifactKind,
    pub spec_digest: [u8; 32],
    pub compiler_version: String,
    pub class_names: Vec<String>,
}

impl From<&CompiledArtifact> for WeightFile {
    fn from(a: &CompiledArtifact) -> Self {
        Self {
            network: a.network.clone(),
            kind: a.kind,
            spec_digest: a.spec_digest,
            compiler_version: COMPILER_VERSION.to_owned(),
            class_names: a.class_names.clone(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    format: String,
    format_version: u32,
    kind: String,
    spec_digest: String,
    compiler_version: String,
    class_names: Vec<String>,
    input_shape: (usize, usize),
    conv: ConvDoc,
    dense: Vec<DenseDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvDoc {
    kernel_shape: (usize, usize),
    filters: Vec<FilterDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterDoc {
    bias: f64,
    kernel: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseDoc {
    in_dim: usize,
    out_dim: usize,
    biases: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
}

fn num(v: f64) -> String {
    serde_json::to_string(&v).expect("finite weight")
}

fn list(values: impl IntoIterator<Item = f64>) -> String {
    let cells: Vec<String> = values.into_iter().map(num).collect();
    format!("[{}]", cells.join(", "))
}

pub fn weights_to_json(w: &WeightFile) -> String {
    let net = &w.network;
    let mut s = String::new();
    let names = serde_json::to_string(&w.class_names).expect("strings");
    let (m, n) = net.input_shape();
    let (kh, kw) = net.conv().kernel_shape();
    let _ = writeln!(s, "{{");
    let _ = writeln!(s, "  \"format\": \"{FORMAT_NAME}\",");
    let _ = writeln!(s, "  \"format_version\": {FORMAT_VERSION},");
    let _ = writeln!(s, "  \"kind\": \"{}\",", w.kind.as_str());
    let _ = writeln!(s, "  \"spec_digest\": \"{}\",", hex::encode(w.spec_digest));
    let _ = writeln!(
        s,
        "  \"compiler_version\": {},",
        serde_json::to_string(&w.compiler_version).expect("string")
    );
    let _ = writeln!(s, "  \"class_names\": {names},");
    let _ = writeln!(s, "  \"input_shape\": [{m}, {n}],");
    let _ = writeln!(
        s,
        "  \"conv\": {{\n    \"kernel_shape\": [{kh}, {kw}],\n    \"filters\": ["
    );
    let filters = net.conv().filters();
    for (i, f) in filters.iter().enumerate() {
        let rows: Vec<String> = f.kernel.to_rows().into_iter().map(list).collect();
        let sep = if i + 1 < filters.len() { "," } else { "" };
        let _ = writeln!(
            s,
            "      {{\"bias\": {}, \"kernel\": [{}]}}{sep}",
            num(f.bias),
            rows.join(", ")
        );
    }
    let _ = writeln!(s, "    ]\n  }},\n  \"dense\": [");
    let layers = net.dense();
    for (li, layer) in layers.iter().enumerate() {
        let _ = writeln!(s, "    {{");
        let _ = writeln!(s, "      \"in_dim\": {},", layer.in_dim());
        let _ = writeln!(s, "      \"out_dim\": {},", layer.out_dim());
        let _ = writeln!(
            s,
            "      \"biases\": {},",
            list(layer.biases().iter().copied())
        );
        let _ = writeln!(s, "      \"rows\": [");
        for r in 0..layer.out_dim() {
            let cells: Vec<String> = layer
                .row(r)
                .map(|(c, v)| format!("[{c}, {}]", num(v)))
                .collect();
            let sep = if r + 1 < layer.out_dim() { "," } else { "" };
            let _ = writeln!(s, "        [{}]{sep}", cells.join(", "));
        }
        let sep = if li + 1 < layers.len() { "," } else { "" };
        let _ = writeln!(s, "      ]\n    }}{sep}");
    }
    s.push_str("  ]\n}\n");
    s
}

pub fn parse_weights(text: &str) -> Result<WeightFile> {
    let doc: Doc = serde_json::from_str(text).map_err(|e| Error::format(WHAT, e.to_string()))?;
    if doc.format != FORMAT_NAME {
        return Err(Error::format(WHAT, format!("format `{}`", doc.format)));
    }
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            what: WHAT,
            found: doc.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = ArtifactKind::parse(&doc.kind)
        .ok_or_else(|| Error::format(WHAT, format!("kind `{}`", doc.kind)))?;
    let digest = hex::decode(&doc.spec_digest)
        .ok()
        .and_then(|d| <[u8; 32]>::try_from(d).ok())
        .ok_or_else(|| Error::format(WHAT, "spec_digest must be 64 hex digits"))?;
    let filters = doc
        .conv
        .filters
        .into_iter()
        .map(|f| {
            let kernel = Matrix::from_rows(&f.kernel)?;
            if kernel.shape() != doc.conv.kernel_shape {
                return Err(Error::format(
                    WHAT,
                    "filter shape differs from kernel_shape",
                ));
            }
            Ok(ConvFilter::new(kernel, f.bias))
        })
        .collect::<Result<Vec<_>>>()?;
    let dense = doc
        .dense
        .into_iter()
        .map(|d| {
            if d.rows.len() != d.out_dim {
                return Err(Error::format(
                    WHAT,
                    format!("{} rows for out_dim {}", d.rows.len(), d.out_dim),
                ));
            }
            DenseLayer::from_sparse_rows(d.in_dim, d.rows, d.biases)
        })
        .collect::<Result<Vec<_>>>()?;
    let network = Network::new(doc.input_shape, ConvLayer::new(filters)?, dense)?;
    Ok(WeightFile {
        network,
        kind,
        spec_digest: digest,
        compiler_version: doc.compiler_version,
        class_names: doc.class_names,
    })
}

pub fn save_weights(path: impl AsRef<Path>, w: &WeightFile) -> Result<()> {
    write_bytes(path.as_ref(), weights_to_json(w).as_bytes())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightFile> {
    parse_weights(&read_text(path.as_ref())?)
}
