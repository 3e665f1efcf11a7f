//! Light graph convolution over the joint user/item node set.
//!
//! Nodes `0..n_users` are users and `n_users..n_users + n_items` are items.
//! The operator `Â = D^{-1/2} A D^{-1/2}` is stored row-compressed; it is
//! symmetric, so the adjoint of `k` propagation steps is again `k` steps and
//! [`backward`] reuses [`NormalizedAdjacency::multiply`].

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Edge, InteractionDataset};
use crate::error::{Error, Result};

/// Standard deviation of the initial embedding entries.
pub const INIT_STD: f64 = 0.1;

/// Symmetric-normalised bipartite adjacency in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n_users: usize,
    n_items: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
    degrees: Vec<u32>,
}

impl NormalizedAdjacency {
    /// Builds the operator from train edges. Duplicate edges must already be removed.
    pub fn from_edges(n_users: usize, n_items: usize, edges: &[Edge]) -> Self {
        let n_nodes = n_users + n_items;
        let mut neighbours: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
        for e in edges {
            let item_node = (n_users + e.item as usize) as u32;
            neighbours[e.user as usize].push(item_node);
            neighbours[item_node as usize].push(e.user);
        }
        let degrees: Vec<u32> = neighbours.iter().map(|n| n.len() as u32).collect();
        let inv_sqrt: Vec<f64> = degrees
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
            .collect();

        let mut row_offsets = Vec::with_capacity(n_nodes + 1);
        let mut col_indices = Vec::with_capacity(2 * edges.len());
        let mut values = Vec::with_capacity(2 * edges.len());
        row_offsets.push(0);
        for (row, cols) in neighbours.iter_mut().enumerate() {
            cols.sort_unstable();
            for &c in cols.iter() {
                col_indices.push(c);
                values.push(inv_sqrt[row] * inv_sqrt[c as usize]);
            }
            row_offsets.push(col_indices.len());
        }
        NormalizedAdjacency {
            n_users,
            n_items,
            row_offsets,
            col_indices,
            values,
            degrees,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Train degree of every node.
    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entry `(row, col)`, zero when absent.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.row_offsets[row]..self.row_offsets[row + 1];
        match self.col_indices[range.clone()].binary_search(&(col as u32)) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    /// `Â · x`. Rows are computed independently, so the result does not
    /// depend on the thread count.
    pub fn multiply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "operator has {} nodes, matrix has {} rows",
                self.n_nodes(),
                x.nrows()
            )));
        }
        let d = x.ncols();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Array2::<f64>::zeros((self.n_nodes(), d));
        if d == 0 {
            return Ok(out);
        }
        out.as_slice_mut()
            .expect("fresh array is contiguous")
            .par_chunks_mut(d)
            .with_min_len(64)
            .enumerate()
            .for_each(|(row, dst)| {
                for nz in self.row_offsets[row]..self.row_offsets[row + 1] {
                    let col = self.col_indices[nz] as usize;
                    let w = self.values[nz];
                    let from = &src[col * d..(col + 1) * d];
                    for (o, v) in dst.iter_mut().zip(from) {
                        *o += w * v;
                    }
                }
            });
        Ok(out)
    }
}

pub fn build_normalized_adjacency(dataset: &InteractionDataset) -> NormalizedAdjacency {
    NormalizedAdjacency::from_edges(dataset.n_users, dataset.n_items, &dataset.train)
}

/// Uniform layer weights `1 / (layers + 1)`.
pub fn uniform_layer_weights(layers: usize) -> Vec<f64> {
    vec![1.0 / (layers + 1) as f64; layers + 1]
}

/// Base embeddings, their propagated layers, the combined output and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub base: Array2<f64>,
    /// `E^0..E^K`; empty until [`EmbeddingState::refresh`] runs.
    pub layers: Vec<Array2<f64>>,
    pub final_emb: Array2<f64>,
    pub layer_weights: Vec<f64>,
    pub moment1: Array2<f64>,
    pub moment2: Array2<f64>,
    pub step: u64,
}

impl EmbeddingState {
    pub fn n_nodes(&self) -> usize {
        self.base.nrows()
    }

    pub fn dim(&self) -> usize {
        self.base.ncols()
    }

    /// Re-runs propagation and layer combination from the current base.
    pub fn refresh(&mut self, adj: &NormalizedAdjacency) -> Result<()> {
        let layers = propagate(adj, &self.base.view(), self.layer_weights.len() - 1)?;
        self.final_emb = combine_layers(&layers, &self.layer_weights)?;
        self.layers = layers;
        Ok(())
    }
}

/// Base entries drawn i.i.d. from `N(0, 0.1²)` with a seeded ChaCha stream.
/// Layer weights default to a single (identity) layer until set by the caller.
pub fn init_embeddings(n_nodes: usize, dim: usize, seed: u64) -> EmbeddingState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let base = Array2::from_shape_simple_fn((n_nodes, dim), || normal.sample(&mut rng));
    EmbeddingState {
        final_emb: base.clone(),
        layers: Vec::new(),
        layer_weights: vec![1.0],
        moment1: Array2::zeros((n_nodes, dim)),
        moment2: Array2::zeros((n_nodes, dim)),
        step: 0,
        base,
    }
}

/// Returns `[E^0, Â E^0, …, Â^layers E^0]`.
pub fn propagate(
    adj: &NormalizedAdjacency,
    base: &ArrayView2<f64>,
    layers: usize,
) -> Result<Vec<Array2<f64>>> {
    check_finite(base, "base embeddings")?;
    let mut out = Vec::with_capacity(layers + 1);
    out.push(base.to_owned());
    for k in 0..layers {
        let next = adj.multiply(&out[k].view())?;
        check_finite(&next.view(), &format!("propagated layer {}", k + 1))?;
        out.push(next);
    }
    Ok(out)
}

/// `Σ_k weights[k] · layers[k]`.
pub fn combine_layers(layers: &[Array2<f64>], weights: &[f64]) -> Result<Array2<f64>> {
    if layers.is_empty() || layers.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers but {} weights",
            layers.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::config(format!("layer weights must sum to 1, got {sum}")));
    }
    let mut out = Array2::<f64>::zeros(layers[0].raw_dim());
    for (layer, &w) in layers.iter().zip(weights) {
        if layer.raw_dim() != out.raw_dim() {
            return Err(Error::ShapeMismatch("layers differ in shape".into()));
        }
        out.scaled_add(w, layer);
    }
    Ok(out)
}

/// Gradient w.r.t. the base embeddings given the gradient w.r.t. the combined
/// output: `Σ_k α_k Â^k · grad_final`.
pub fn backward(
    adj: &NormalizedAdjacency,
    grad_final: &ArrayView2<f64>,
    weights: &[f64],
) -> Result<Array2<f64>> {
    let (&last, rest) = weights
        .split_last()
        .ok_or_else(|| Error::ShapeMismatch("no layer weights".into()))?;
    // Horner: α_0 G + Â(α_1 G + Â(α_2 G + …))
    let mut acc = grad_final.mapv(|g| g * last);
    for &w in rest.iter().rev() {
        acc = adj.multiply(&acc.view())?;
        acc.scaled_add(w, grad_final);
    }
    Ok(acc)
}

/// Gradient w.r.t. the base embeddings given one gradient per layer:
/// `Σ_k Â^k · grad_layers[k]`.
pub fn backward_layers(adj: &NormalizedAdjacency, grad_layers: &[Array2<f64>]) -> Result<Array2<f64>> {
    let (last, rest) = grad_layers
        .split_last()
        .ok_or_else(|| Error::ShapeMismatch("no layer gradients".into()))?;
    let mut acc = last.clone();
    for g in rest.iter().rev() {
        acc = adj.multiply(&acc.view())?;
        if acc.raw_dim() != g.raw_dim() {
            return Err(Error::ShapeMismatch("layer gradients differ in shape".into()));
        }
        acc += g;
    }
    Ok(acc)
}

pub(crate) fn check_finite(x: &ArrayView2<f64>, what: &str) -> Result<()> {
    let mut bad = false;
    Zip::from(x).for_each(|v| bad |= !v.is_finite());
    if bad {
        Err(Error::NonFinite(what.to_string()))
    } else {
        Ok(())
    }
}
