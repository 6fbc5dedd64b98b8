//! Analytic weight construction.
//!
//! Every compiled network shares one layout for its convolutional layer:
//! per tile, four 2x2 corner-selector filters with bias 0 (they reproduce
//! raw pixels), followed by four filters `2 * w_corner` with bias `-2 s` for
//! each distinct nonzero tile value `s` (they produce `relu(2x - 2s)`).
//! Any pixel `(p, q)` is read from the corner selector that reaches it from
//! the nearest in-range 2x2 window, so the whole canvas is addressable.
//!
//! The first dense layer holds one neuron per tile placement:
//!
//! ```text
//! relu(eps - sum_supp |x - t|),   |y - c| = relu(2y - 2c) - relu(y) + c  (y >= 0)
//! ```
//!
//! so each row has exactly `2 |supp(t)|` nonzero weights and bias
//! `eps - sum_supp t`. Later layers sum placements into tile/feature scores
//! and combine feature scores through a ReLU min tree built from
//! `min(a, b) = relu(b) - relu(b - a)`.
//!
//! `fc_layers` in reports counts hidden dense layers: every dense layer
//! except the output layer.

use crate::error::{Error, Result};
use crate::model::{Feature, FramedTile, ImageClassSpec};
use crate::plf::RegionIndex;
use crate::tensor::{dense_chain_forward, ConvFilter, ConvLayer, DenseLayer, Matrix, Network};

pub const COMPILER_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArtifactKind {
    Tile,
    Feature,
    ClassifierDeep,
    ClassifierShallow,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Tile => "tile",
            ArtifactKind::Feature => "feature",
            ArtifactKind::ClassifierDeep => "classifier_deep",
            ArtifactKind::ClassifierShallow => "classifier_shallow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "tile" => ArtifactKind::Tile,
            "feature" => ArtifactKind::Feature,
            "classifier_deep" => ArtifactKind::ClassifierDeep,
            "classifier_shallow" => ArtifactKind::ClassifierShallow,
            _ => return None,
        })
    }
}

/// Size formulas for a collection of images with `r` = max feature count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds {
    /// `sum_j 4 c(I_j) + 4 s(I_j)`.
    pub filters: usize,
    /// `(mn + 7) sum_j s(I_j)`.
    pub neurons: usize,
    /// `2 ceil(log2 r) + 1`.
    pub layers: usize,
    /// `sum_tiles 4 (d + 1)` with `d` distinct nonzero values per tile; what
    /// the construction actually emits.
    pub proof_filters: usize,
}

impl Bounds {
    fn from_parts<'a>(
        canvas: (usize, usize),
        images: impl IntoIterator<Item = &'a [Feature]>,
    ) -> Self {
        let mut filters = 0;
        let mut s_total = 0;
        let mut proof_filters = 0;
        let mut r = 1;
        for features in images {
            r = r.max(features.len());
            for f in features {
                let cx = f.complexity();
                filters += 4 * cx.c + 4 * cx.s;
                s_total += cx.s;
                proof_filters += f
                    .tiles()
                    .iter()
                    .map(|t| 4 * (t.distinct_values().len() + 1))
                    .sum::<usize>();
            }
        }
        Bounds {
            filters,
            neurons: (canvas.0 * canvas.1 + 7) * s_total,
            layers: 2 * ceil_log2(r) + 1,
            proof_filters,
        }
    }

    pub fn for_spec(spec: &ImageClassSpec) -> Self {
        Self::from_parts(spec.canvas(), spec.images().iter().map(|i| i.features()))
    }

    pub fn for_feature(feature: &Feature, canvas: (usize, usize)) -> Self {
        Self::from_parts(canvas, [std::slice::from_ref(feature)])
    }

    pub fn for_tile(tile: &FramedTile, canvas: (usize, usize)) -> Self {
        let feature = Feature::new(vec![tile.clone()]).expect("one tile");
        Self::for_feature(&feature, canvas)
    }
}

/// Structural counts of a compiled network next to the bound formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub conv_filters: usize,
    /// Hidden dense layers (all dense layers but the output layer).
    pub fc_layers: usize,
    /// Dense units, hidden and output.
    pub fc_neurons: usize,
    pub dense_weights: usize,
    pub dense_nonzeros: usize,
    /// Zero entries over all dense weight matrices.
    pub zero_weight_fraction: f64,
    /// Zero entries of the conv-to-dense weight matrix alone.
    pub first_layer_zero_fraction: f64,
    pub max_first_layer_row_nonzeros: usize,
    pub bounds: Bounds,
}

impl ParamReport {
    pub fn filters_within_bound(&self) -> bool {
        self.conv_filters <= self.bounds.filters
    }

    pub fn neurons_within_bound(&self) -> bool {
        self.fc_neurons <= self.bounds.neurons
    }

    pub fn layers_match(&self) -> bool {
        self.fc_layers == self.bounds.layers
    }
}

pub fn param_report(net: &Network, bounds: Bounds) -> ParamReport {
    let dense = net.dense();
    let dense_weights: usize = dense.iter().map(|l| l.in_dim() * l.out_dim()).sum();
    let dense_nonzeros: usize = dense.iter().map(DenseLayer::nonzeros).sum();
    let first = &dense[0];
    let first_total = first.in_dim() * first.out_dim();
    ParamReport {
        conv_filters: net.conv().len(),
        fc_layers: dense.len() - 1,
        fc_neurons: dense.iter().map(DenseLayer::out_dim).sum(),
        dense_weights,
        dense_nonzeros,
        zero_weight_fraction: 1.0 - dense_nonzeros as f64 / dense_weights as f64,
        first_layer_zero_fraction: 1.0 - first.nonzeros() as f64 / first_total as f64,
        max_first_layer_row_nonzeros: (0..first.out_dim())
            .map(|r| first.row_nonzeros(r))
            .max()
            .unwrap_or(0),
        bounds,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledArtifact {
    pub network: Network,
    pub kind: ArtifactKind,
    pub spec_digest: [u8; 32],
    /// Output names; empty for tile and feature networks.
    pub class_names: Vec<String>,
    pub report: ParamReport,
}

pub(crate) fn ceil_log2(r: usize) -> usize {
    assert!(r >= 1);
    (usize::BITS - (r - 1).leading_zeros()) as usize
}

fn corner_kernels() -> [Matrix; 4] {
    let sel =
        |u: usize, v: usize| Matrix::from_fn(2, 2, |a, b| f64::from(u8::from(a == u && b == v)));
    [sel(0, 0), sel(0, 1), sel(1, 0), sel(1, 1)]
}

/// Conv filters of one tile and where they sit in the flattened output.
struct TileBank {
    first_filter: usize,
    values: Vec<f64>,
}

struct ConvBuilder {
    canvas: (usize, usize),
    filters: Vec<ConvFilter>,
    corners: [Matrix; 4],
}

impl ConvBuilder {
    fn new(canvas: (usize, usize)) -> Result<Self> {
        if canvas.0 < 2 || canvas.1 < 2 {
            return Err(Error::Compile(format!(
                "canvas {}x{} is smaller than the 2x2 kernels",
                canvas.0, canvas.1
            )));
        }
        Ok(Self {
            canvas,
            filters: Vec::new(),
            corners: corner_kernels(),
        })
    }

    fn plane(&self) -> usize {
        (self.canvas.0 - 1) * (self.canvas.1 - 1)
    }

    fn push_tile(&mut self, tile: &FramedTile) -> Result<TileBank> {
        if !tile.fits(self.canvas) {
            let (k, l) = tile.shape();
            return Err(Error::Compile(format!(
                "tile {k}x{l} exceeds canvas {}x{}",
                self.canvas.0, self.canvas.1
            )));
        }
        let first_filter = self.filters.len();
        for w in &self.corners {
            self.filters.push(ConvFilter::new(w.clone(), 0.0));
        }
        let values = tile.distinct_values();
        for &s in &values {
            for w in &self.corners {
                self.filters
                    .push(ConvFilter::new(w.map(|v| 2.0 * v), -2.0 * s));
            }
        }
        Ok(TileBank {
            first_filter,
            values,
        })
    }

    /// Flattened conv-output index carrying pixel `(p, q)` through `bank`
    /// (0 = raw pixel, `1 + i` = the `i`-th distinct value).
    fn slot(&self, bank: &TileBank, group: usize, p: usize, q: usize) -> usize {
        let (m, n) = self.canvas;
        let dr = usize::from(p == m - 1);
        let dc = usize::from(q == n - 1);
        let filter = bank.first_filter + 4 * group + 2 * dr + dc;
        filter * self.plane() + (p - dr) * (n - 1) + (q - dc)
    }

    /// One row per placement: `relu(eps - distance)`.
    fn placement_rows(
        &self,
        tile: &FramedTile,
        bank: &TileBank,
    ) -> (Vec<Vec<(usize, f64)>>, Vec<f64>) {
        let (k, l) = tile.shape();
        let region = RegionIndex::new(self.canvas.0, self.canvas.1, k, l).expect("tile fits");
        let t = tile.values();
        let support_sum: f64 = tile.support().iter().map(|&(u, v)| t.get(u, v)).sum();
        let bias = tile.epsilon() - support_sum;
        let value_group: Vec<usize> = tile
            .support()
            .iter()
            .map(|&(u, v)| {
                let s = t.get(u, v);
                1 + bank
                    .values
                    .iter()
                    .position(|x| x.to_bits() == s.to_bits())
                    .expect("support value is in the bank")
            })
            .collect();
        let mut rows = Vec::with_capacity(region.len());
        for (i, j) in region.iter() {
            let mut row = Vec::with_capacity(2 * tile.support_size());
            for (&(u, v), &g) in tile.support().iter().zip(&value_group) {
                row.push((self.slot(bank, 0, i + u, j + v), 1.0));
                row.push((self.slot(bank, g, i + u, j + v), -1.0));
            }
            row.sort_unstable_by_key(|&(c, _)| c);
            rows.push(row);
        }
        let biases = vec![bias; rows.len()];
        (rows, biases)
    }

    fn width(&self) -> usize {
        self.filters.len() * self.plane()
    }

    fn finish(self) -> Result<ConvLayer> {
        ConvLayer::new(self.filters)
    }
}

/// Placement layer for a list of tiles; returns the conv layer, the dense
/// layer and the neuron range owned by each tile.
fn placement_stage(
    canvas: (usize, usize),
    tiles: &[&FramedTile],
) -> Result<(ConvLayer, DenseLayer, Vec<std::ops::Range<usize>>)> {
    let mut conv = ConvBuilder::new(canvas)?;
    let banks = tiles
        .iter()
        .map(|t| conv.push_tile(t))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut biases = Vec::new();
    let mut ranges = Vec::with_capacity(tiles.len());
    for (tile, bank) in tiles.iter().zip(&banks) {
        let (r, b) = conv.placement_rows(tile, bank);
        let start = rows.len();
        rows.extend(r);
        biases.extend(b);
        ranges.push(start..rows.len());
    }
    let width = conv.width();
    let dense = DenseLayer::from_sparse_rows(width, rows, biases)?;
    Ok((conv.finish()?, dense, ranges))
}

fn sum_layer(in_dim: usize, groups: &[Vec<usize>]) -> Result<DenseLayer> {
    let rows = groups
        .iter()
        .map(|g| g.iter().map(|&c| (c, 1.0)).collect())
        .collect();
    DenseLayer::from_sparse_rows(in_dim, rows, vec![0.0; groups.len()])
}

fn range_indices(ranges: &[std::ops::Range<usize>]) -> Vec<usize> {
    ranges.iter().flat_map(|r| r.clone()).collect()
}

pub fn compile_tile_network(tile: &FramedTile, m: usize, n: usize) -> Result<CompiledArtifact> {
    let (conv, placements, _) = placement_stage((m, n), &[tile])?;
    let output = sum_layer(placements.out_dim(), &[(0..placements.out_dim()).collect()])?;
    let network = Network::new((m, n), conv, vec![placements, output])?;
    let report = param_report(&network, Bounds::for_tile(tile, (m, n)));
    Ok(CompiledArtifact {
        network,
        kind: ArtifactKind::Tile,
        spec_digest: tile.digest(),
        class_names: Vec::new(),
        report,
    })
}

pub fn compile_feature_network(feature: &Feature, m: usize, n: usize) -> Result<CompiledArtifact> {
    let tiles: Vec<&FramedTile> = feature.tiles().iter().collect();
    let (conv, placements, ranges) = placement_stage((m, n), &tiles)?;
    let output = sum_layer(placements.out_dim(), &[range_indices(&ranges)])?;
    let network = Network::new((m, n), conv, vec![placements, output])?;
    let report = param_report(&network, Bounds::for_feature(feature, (m, n)));
    Ok(CompiledArtifact {
        network,
        kind: ArtifactKind::Feature,
        spec_digest: feature.digest(),
        class_names: Vec::new(),
        report,
    })
}

/// Linear combination of the previous layer's neurons, sorted by index.
type Form = Vec<(usize, f64)>;

fn form_sub(b: &Form, a: &Form) -> Form {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < b.len() || j < a.len() {
        let take_b = j >= a.len() || (i < b.len() && b[i].0 < a[j].0);
        let take_a = i >= b.len() || (j < a.len() && a[j].0 < b[i].0);
        let (c, w) = if take_b {
            i += 1;
            b[i - 1]
        } else if take_a {
            j += 1;
            (a[j - 1].0, -a[j - 1].1)
        } else {
            i += 1;
            j += 1;
            (b[i - 1].0, b[i - 1].1 - a[j - 1].1)
        };
        if w != 0.0 {
            out.push((c, w));
        }
    }
    out
}

/// Parallel ReLU min trees. Each group lists `2^p` (`p >= 1`) input indices;
/// the result has `2p` layers (`2p - 1` hidden) and one output per group.
///
/// Round structure: a pair layer holds `relu(b)` and `relu(b - a)` for every
/// adjacent pair; their difference is the pair minimum. Between rounds the
/// minima are materialized as neurons; the last round's minima are the
/// outputs.
fn min_tree_layers(input_dim: usize, groups: &[Vec<usize>]) -> Result<Vec<DenseLayer>> {
    let leaves = groups[0].len();
    assert!(leaves >= 2 && leaves.is_power_of_two());
    assert!(groups.iter().all(|g| g.len() == leaves));

    let mut signals: Vec<Vec<Form>> = groups
        .iter()
        .map(|g| g.iter().map(|&i| vec![(i, 1.0)]).collect())
        .collect();
    let mut prev_dim = input_dim;
    let mut layers = Vec::new();
    loop {
        let mut rows: Vec<Form> = Vec::new();
        let mut next: Vec<Vec<Form>> = Vec::with_capacity(signals.len());
        for group in &signals {
            let mut mins = Vec::with_capacity(group.len() / 2);
            for pair in group.chunks(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let at = rows.len();
                rows.push(b.clone());
                rows.push(form_sub(b, a));
                mins.push(vec![(at, 1.0), (at + 1, -1.0)]);
            }
            next.push(mins);
        }
        let width = rows.len();
        layers.push(DenseLayer::from_sparse_rows(
            prev_dim,
            rows,
            vec![0.0; width],
        )?);
        prev_dim = width;

        let rows: Vec<Form> = next.iter().flatten().cloned().collect();
        let width = rows.len();
        layers.push(DenseLayer::from_sparse_rows(
            prev_dim,
            rows,
            vec![0.0; width],
        )?);
        prev_dim = width;
        if next[0].len() == 1 {
            break;
        }
        let mut k = 0;
        signals = next
            .iter()
            .map(|g| {
                g.iter()
                    .map(|_| {
                        k += 1;
                        vec![(k - 1, 1.0)]
                    })
                    .collect()
            })
            .collect();
    }
    Ok(layers)
}

/// Pads `indices` to the next power of two by repeating the last entry.
fn pad_group(indices: &[usize], leaves: usize) -> Vec<usize> {
    let last = *indices.last().expect("nonempty group");
    let mut g = indices.to_vec();
    g.resize(leaves, last);
    g
}

/// Dense-only network computing `min(v)` for nonnegative `v` of fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct MinNetwork {
    arity: usize,
    layers: Vec<DenseLayer>,
}

impl MinNetwork {
    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_neurons(&self) -> usize {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(DenseLayer::out_dim)
            .sum()
    }

    /// Evaluates the network; inputs must be nonnegative.
    pub fn evaluate(&self, v: &[f64]) -> Result<f64> {
        if let Some(x) = v.iter().find(|x| x.is_nan() || **x < 0.0) {
            return Err(Error::InvalidValue(format!(
                "min network inputs must be nonnegative (got {x})"
            )));
        }
        Ok(dense_chain_forward(&self.layers, v)?[0])
    }
}

pub fn compile_min_network(l: usize) -> Result<MinNetwork> {
    if l == 0 {
        return Err(Error::Compile("min network over zero inputs".into()));
    }
    let layers = if l == 1 {
        vec![DenseLayer::from_sparse_rows(
            1,
            vec![vec![(0, 1.0)]],
            vec![0.0],
        )?]
    } else {
        let leaves = 1 << ceil_log2(l);
        let group: Vec<usize> = (0..l).collect();
        min_tree_layers(l, &[pad_group(&group, leaves)])?
    };
    Ok(MinNetwork { arity: l, layers })
}

/// Tiles of a spec in layout order plus, per image, the tile-index ranges of
/// its features.
fn spec_tiles(spec: &ImageClassSpec) -> (Vec<&FramedTile>, Vec<Vec<std::ops::Range<usize>>>) {
    let mut tiles = Vec::new();
    let mut per_image = Vec::new();
    for img in spec.images() {
        let mut feats = Vec::new();
        for f in img.features() {
            let start = tiles.len();
            tiles.extend(f.tiles().iter());
            feats.push(start..tiles.len());
        }
        per_image.push(feats);
    }
    (tiles, per_image)
}

/// Network whose outputs are `(phi_I1, ..., phi_Il)`.
pub fn compile_classifier(spec: &ImageClassSpec) -> Result<CompiledArtifact> {
    let canvas = spec.canvas();
    let (tiles, per_image) = spec_tiles(spec);
    let (conv, placements, ranges) = placement_stage(canvas, &tiles)?;
    let width = placements.out_dim();

    // Placement neurons of every feature, image-major.
    let feature_neurons: Vec<Vec<usize>> = per_image
        .iter()
        .flatten()
        .map(|tr| range_indices(&ranges[tr.clone()]))
        .collect();

    let r = spec.max_features();
    let mut dense = vec![placements];
    if r == 1 {
        dense.push(sum_layer(width, &feature_neurons)?);
    } else {
        dense.push(sum_layer(width, &feature_neurons)?);
        let leaves = 1 << ceil_log2(r);
        let mut groups = Vec::with_capacity(per_image.len());
        let mut next = 0;
        for feats in &per_image {
            let idx: Vec<usize> = (next..next + feats.len()).collect();
            next += feats.len();
            groups.push(pad_group(&idx, leaves));
        }
        dense.extend(min_tree_layers(feature_neurons.len(), &groups)?);
    }
    let network = Network::new(canvas, conv, dense)?;
    let report = param_report(&network, Bounds::for_spec(spec));
    Ok(CompiledArtifact {
        network,
        kind: ArtifactKind::ClassifierDeep,
        spec_digest: spec.digest(),
        class_names: spec.names(),
        report,
    })
}

/// Network whose outputs are `(phi'_I1, ..., phi'_Il)`: per image, the sum of
/// its feature scores. One hidden dense layer.
pub fn compile_shallow_classifier(spec: &ImageClassSpec) -> Result<CompiledArtifact> {
    let canvas = spec.canvas();
    let (tiles, per_image) = spec_tiles(spec);
    let (conv, placements, ranges) = placement_stage(canvas, &tiles)?;
    let groups: Vec<Vec<usize>> = per_image
        .iter()
        .map(|feats| {
            let start = feats.first().map_or(0, |r| r.start);
            let end = feats.last().map_or(0, |r| r.end);
            range_indices(&ranges[start..end])
        })
        .collect();
    let output = sum_layer(placements.out_dim(), &groups)?;
    let network = Network::new(canvas, conv, vec![placements, output])?;
    let mut bounds = Bounds::for_spec(spec);
    bounds.layers = 1;
    let report = param_report(&network, bounds);
    Ok(CompiledArtifact {
        network,
        kind: ArtifactKind::ClassifierShallow,
        spec_digest: spec.digest(),
        class_names: spec.names(),
        report,
    })
}
