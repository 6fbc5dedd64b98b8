//! Forward semantics of single-channel convolutional networks.
//!
//! A [`Network`] is one convolutional layer (valid 2-D convolution, stride 1,
//! bias, ReLU), a flattening step and a chain of fully connected ReLU layers.
//! Flattening is filter-major, then row-major within each feature map; the
//! compiler depends on this ordering when it addresses conv outputs.
//!
//! All arithmetic is `f64`. Storage is 0-based row-major.

use std::ops::Deref;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("matrix shape {rows}x{cols} is empty")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be nonempty");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be nonempty");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Copies the `rows x cols` window whose top-left corner is `(i, j)`.
    pub fn window(&self, i: usize, j: usize, rows: usize, cols: usize) -> Result<Matrix> {
        if i + rows > self.rows || j + cols > self.cols {
            return Err(Error::dim(format!(
                "window {rows}x{cols} at ({i},{j}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(Matrix::from_fn(rows, cols, |a, b| self.get(i + a, j + b)))
    }
}

/// An element of the input space: every entry lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatrix(Matrix);

impl ImageMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if let Some((idx, v)) = values
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidValue(format!(
                "pixel ({}, {}) = {v} lies outside [0, 1]",
                idx / values.cols,
                idx % values.cols
            )));
        }
        Ok(Self(values))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(Matrix::zeros(rows, cols))
    }

    pub fn constant(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(Matrix::filled(rows, cols, value))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Writes a pixel, clamping into `[0, 1]`.
    pub fn set_clamped(&mut self, i: usize, j: usize, value: f64) {
        self.0.set(i, j, value.clamp(0.0, 1.0));
    }
}

impl Deref for ImageMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Softmax over all coordinates. Not part of compiled networks; argmax is
/// unchanged by it.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest coordinate, lowest index on ties. `None` for an empty
/// slice.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Valid (no padding, stride 1) 2-D convolution in the cross-correlation form
/// `out[a][b] = sum_{u,v} w[u][v] * x[a+u][b+v]`.
pub fn conv2d_valid(x: &Matrix, kernel: &Matrix) -> Result<Matrix> {
    let (m, n) = x.shape();
    let (kh, kw) = kernel.shape();
    if kh > m || kw > n {
        return Err(Error::dim(format!(
            "kernel {kh}x{kw} larger than input {m}x{n}"
        )));
    }
    let (oh, ow) = (m - kh + 1, n - kw + 1);
    let mut out = Matrix::zeros(oh, ow);
    for a in 0..oh {
        for b in 0..ow {
            let mut acc = 0.0;
            for u in 0..kh {
                for v in 0..kw {
                    acc += kernel.get(u, v) * x.get(a + u, b + v);
                }
            }
            out.set(a, b, acc);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter {
    pub kernel: Matrix,
    pub bias: f64,
}

impl ConvFilter {
    pub fn new(kernel: Matrix, bias: f64) -> Self {
        Self { kernel, bias }
    }
}

/// A bank of filters sharing one kernel shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    filters: Vec<ConvFilter>,
    kernel_shape: (usize, usize),
    /// Nonzero taps `(u, v, w)` per filter, row-major kernel order.
    taps: Vec<Vec<(usize, usize, f64)>>,
}

impl ConvLayer {
    pub fn new(filters: Vec<ConvFilter>) -> Result<Self> {
        let first = filters
            .first()
            .ok_or_else(|| Error::dim("convolutional layer has no filters"))?;
        let kernel_shape = first.kernel.shape();
        if let Some(pos) = filters
            .iter()
            .position(|f| f.kernel.shape() != kernel_shape)
        {
            return Err(Error::dim(format!(
                "filter {pos} has kernel {:?}, expected {kernel_shape:?}",
                filters[pos].kernel.shape()
            )));
        }
        let taps = filters
            .iter()
            .map(|f| {
                let (kh, kw) = kernel_shape;
                let mut t = Vec::new();
                for u in 0..kh {
                    for v in 0..kw {
                        let w = f.kernel.get(u, v);
                        if w != 0.0 {
                            t.push((u, v, w));
                        }
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            filters,
            kernel_shape,
            taps,
        })
    }

    pub fn filters(&self) -> &[ConvFilter] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn kernel_shape(&self) -> (usize, usize) {
        self.kernel_shape
    }

    pub fn output_shape(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_shape;
        if kh > input.0 || kw > input.1 {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than input {}x{}",
                input.0, input.1
            )));
        }
        Ok((input.0 - kh + 1, input.1 - kw + 1))
    }

    /// `relu(conv2d_valid(x, w_i) + b_i)` for every filter, in filter order.
    pub fn forward(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let (oh, ow) = self.output_shape(x.shape())?;
        let flat = self.forward_flat(x)?;
        unflatten(&flat, self.len(), oh, ow)
    }

    /// Same values as `flatten(forward(x))`, produced without intermediate
    /// matrices. Zero kernel taps are skipped, which leaves every sum
    /// bit-identical to the dense evaluation.
    pub fn forward_flat(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (oh, ow) = self.output_shape(x.shape())?;
        let plane = oh * ow;
        let mut out = vec![0.0; plane * self.len()];
        for (f, (filter, taps)) in self.filters.iter().zip(&self.taps).enumerate() {
            let dst = &mut out[f * plane..(f + 1) * plane];
            for a in 0..oh {
                for b in 0..ow {
                    let mut acc = 0.0;
                    for &(u, v, w) in taps {
                        acc += w * x.get(a + u, b + v);
                    }
                    dst[a * ow + b] = (acc + filter.bias).max(0.0);
                }
            }
        }
        Ok(out)
    }
}

/// Concatenates feature maps filter-major, each map row-major.
pub fn flatten(maps: &[Matrix]) -> Result<Vec<f64>> {
    let Some(first) = maps.first() else {
        return Ok(Vec::new());
    };
    let shape = first.shape();
    if let Some(pos) = maps.iter().position(|m| m.shape() != shape) {
        return Err(Error::dim(format!(
            "map {pos} has shape {:?}, expected {shape:?}",
            maps[pos].shape()
        )));
    }
    Ok(maps.iter().flat_map(|m| m.data.iter().copied()).collect())
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &[f64], count: usize, rows: usize, cols: usize) -> Result<Vec<Matrix>> {
    if v.len() != count * rows * cols {
        return Err(Error::dim(format!(
            "vector of length {} cannot hold {count} maps of {rows}x{cols}",
            v.len()
        )));
    }
    v.chunks(rows * cols)
        .map(|chunk| Matrix::new(rows, cols, chunk.to_vec()))
        .collect()
}

/// Fully connected layer `v -> relu(A v + B)`.
///
/// `A` is stored row-compressed with exact zeros dropped; compiled networks
/// are overwhelmingly sparse. Entries inside a row are kept in increasing
/// column order so the accumulation order matches a dense row sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl DenseLayer {
    /// Builds from a dense `out x in` weight matrix.
    pub fn new(weights: &Matrix, biases: Vec<f64>) -> Result<Self> {
        let rows = (0..weights.rows())
            .map(|r| {
                (0..weights.cols())
                    .map(|c| (c, weights.get(r, c)))
                    .collect::<Vec<_>>()
            })
            .collect();
        Self::from_sparse_rows(weights.cols(), rows, biases)
    }

    /// Builds from per-row `(column, weight)` lists. Columns must be strictly
    /// increasing within a row.
    pub fn from_sparse_rows(
        in_dim: usize,
        rows: Vec<Vec<(usize, f64)>>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if rows.len() != biases.len() {
            return Err(Error::dim(format!(
                "{} weight rows but {} biases",
                rows.len(),
                biases.len()
            )));
        }
        if rows.is_empty() || in_dim == 0 {
            return Err(Error::dim("dense layer must have nonzero width"));
        }
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_start.push(0);
        for (r, row) in rows.into_iter().enumerate() {
            let mut prev: Option<usize> = None;
            for (c, w) in row {
                if c >= in_dim {
                    return Err(Error::dim(format!(
                        "row {r} references column {c} of a {in_dim}-wide input"
                    )));
                }
                if prev.is_some_and(|p| p >= c) {
                    return Err(Error::dim(format!(
                        "row {r} columns are not strictly increasing at {c}"
                    )));
                }
                prev = Some(c);
                if w != 0.0 {
                    cols.push(c);
                    weights.push(w);
                }
            }
            row_start.push(cols.len());
        }
        Ok(Self {
            in_dim,
            row_start,
            cols,
            weights,
            biases,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.biases.len()
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Nonzero `(column, weight)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_start[r]..self.row_start[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn row_nonzeros(&self, r: usize) -> usize {
        self.row_start[r + 1] - self.row_start[r]
    }

    pub fn nonzeros(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.row(r)
            .find(|&(col, _)| col == c)
            .map_or(0.0, |(_, w)| w)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.out_dim(), self.in_dim);
        for r in 0..self.out_dim() {
            for (c, w) in self.row(r) {
                m.set(r, c, w);
            }
        }
        m
    }

    /// Copy with every weight and bias multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> DenseLayer {
        let rows = (0..self.out_dim())
            .map(|r| self.row(r).map(|(c, w)| (c, w * factor)).collect())
            .collect();
        let biases = self.biases.iter().map(|b| b * factor).collect();
        DenseLayer::from_sparse_rows(self.in_dim, rows, biases)
            .expect("scaling preserves layer shape")
    }

    /// `A v + B`, before the ReLU.
    pub fn affine(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.in_dim {
            return Err(Error::dim(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim,
                v.len()
            )));
        }
        Ok((0..self.out_dim())
            .map(|r| {
                let mut acc = 0.0;
                for (c, w) in self.row(r) {
                    acc += w * v[c];
                }
                acc + self.biases[r]
            })
            .collect())
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.affine(v)?;
        for x in &mut out {
            *x = x.max(0.0);
        }
        Ok(out)
    }
}

/// Runs a chain of dense layers, checking that widths line up.
pub fn dense_chain_forward(layers: &[DenseLayer], input: &[f64]) -> Result<Vec<f64>> {
    let mut v = input.to_vec();
    for layer in layers {
        v = layer.forward(&v)?;
    }
    Ok(v)
}

/// One convolutional layer, a flattening step and `L'` dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: (usize, usize),
    conv: ConvLayer,
    dense: Vec<DenseLayer>,
}

impl Network {
    pub fn new(
        input_shape: (usize, usize),
        conv: ConvLayer,
        dense: Vec<DenseLayer>,
    ) -> Result<Self> {
        let (oh, ow) = conv.output_shape(input_shape)?;
        let mut width = conv.len() * oh * ow;
        if dense.is_empty() {
            return Err(Error::dim("network needs at least one dense layer"));
        }
        for (i, layer) in dense.iter().enumerate() {
            if layer.in_dim() != width {
                return Err(Error::dim(format!(
                    "dense layer {i} expects {} inputs but receives {width}",
                    layer.in_dim()
                )));
            }
            width = layer.out_dim();
        }
        Ok(Self {
            input_shape,
            conv,
            dense,
        })
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn conv(&self) -> &ConvLayer {
        &self.conv
    }

    pub fn dense(&self) -> &[DenseLayer] {
        &self.dense
    }

    /// Always 1; recorded so serialized networks state it explicitly.
    pub fn conv_layer_count(&self) -> usize {
        1
    }

    pub fn output_dim(&self) -> usize {
        self.dense.last().map_or(0, DenseLayer::out_dim)
    }

    /// Activations after every stage: flattened conv output, then each dense
    /// layer's output.
    pub fn activations(&self, x: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut acts = vec![self.conv.forward_flat(x)?];
        for layer in &self.dense {
            let next = layer.forward(acts.last().expect("nonempty"))?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Forward pass on an arbitrary real matrix of the input shape.
    pub fn forward_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let flat = self.conv.forward_flat(x)?;
        dense_chain_forward(&self.dense, &flat)
    }

    pub fn forward(&self, x: &ImageMatrix) -> Result<Vec<f64>> {
        self.forward_matrix(x.as_matrix())
    }

    /// 0-based index of the winning output, lowest index on ties.
    pub fn classify(&self, x: &ImageMatrix) -> Result<usize> {
        let out = self.forward(x)?;
        Ok(argmax(&out).expect("network output is nonempty"))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::dim(format!(
                "network expects {}x{} input, got {}x{}",
                self.input_shape.0,
                self.input_shape.1,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }
}

pub fn network_forward(x: &ImageMatrix, net: &Network) -> Result<Vec<f64>> {
    net.forward(x)
}

pub fn classify(x: &ImageMatrix, net: &Network) -> Result<usize> {
    net.classify(x)
}
