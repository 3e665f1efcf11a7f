//! Node-level and edge-level mixup of positive pairs.
//!
//! Mixup runs after propagation and never touches the adjacency. Each round
//! appends two blocks of `B` virtual pairs to the batch:
//!
//! - NMix: `û = Σ_k α_k E^k[u]`, `v̂ = Σ_k α_k E^k[v]` with `α` drawn on the simplex.
//! - EMix: `ū = (1−β)u + βv`, `v̄ = βu + (1−β)v` from the combined embeddings, `β ~ U(0, β_max)`.
//!
//! Row layout of an [`AugmentedBatch`] is `[originals, NMix₁, EMix₁, NMix₂, EMix₂, …]`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper limit of the edge-mixup ratio.
pub const MAX_BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// One simplex vector per round, shared by every node in the batch.
    Shared,
    /// A fresh simplex vector for every user row and every item row.
    PerNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixLossMode {
    /// Virtual pairs join the original pairs in one enlarged contrastive batch.
    Joint,
    /// Each block of `B` pairs gets its own contrastive term; terms are summed.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub n_mix: usize,
    /// `β` is drawn from `U(0, beta_max)`; must lie in `(0, 0.5]`.
    pub beta_max: f64,
    pub seed: u64,
    pub alpha_mode: AlphaMode,
    pub loss_mode: MixLossMode,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            n_mix: 0,
            beta_max: MAX_BETA,
            seed: 7,
            alpha_mode: AlphaMode::Shared,
            loss_mode: MixLossMode::Joint,
        }
    }
}

impl MixupConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.beta_max > 0.0 && self.beta_max <= MAX_BETA) {
            out.push(format!("beta_max must lie in (0, 0.5], got {}", self.beta_max));
        }
        out
    }
}

/// Non-negative weights summing to one: i.i.d. `U(0, 1)` draws divided by their sum.
pub fn sample_simplex_weights<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    if len <= 1 {
        return vec![1.0; len];
    }
    loop {
        let draws: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 {
            return draws.into_iter().map(|d| d / sum).collect();
        }
    }
}

fn check_simplex(alpha: &[f64], n_layers: usize) -> Result<()> {
    if alpha.len() != n_layers {
        return Err(Error::ShapeMismatch(format!(
            "{} mixup weights for {n_layers} layers",
            alpha.len()
        )));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !(*a >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("mixup weights {alpha:?} are not on the simplex")));
    }
    Ok(())
}

fn check_nodes(nodes: &[usize], n_nodes: usize) -> Result<()> {
    match nodes.iter().find(|&&n| n >= n_nodes) {
        Some(n) => Err(Error::IndexOutOfRange(format!("node {n} of {n_nodes}"))),
        None => Ok(()),
    }
}

fn mix_rows<'a>(
    layers: &[Array2<f64>],
    nodes: &[usize],
    alpha_for: impl Fn(usize) -> &'a [f64],
) -> Result<Array2<f64>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no layer embeddings".into()))?;
    check_nodes(nodes, first.nrows())?;
    let mut out = Array2::zeros((nodes.len(), first.ncols()));
    for (t, (mut row, &node)) in out.axis_iter_mut(Axis(0)).zip(nodes).enumerate() {
        let alpha = alpha_for(t);
        check_simplex(alpha, layers.len())?;
        for (layer, &a) in layers.iter().zip(alpha) {
            row.scaled_add(a, &layer.row(node));
        }
    }
    Ok(out)
}

/// Node-level mixup with one weight vector for all rows.
/// `user_nodes`/`item_nodes` index the joint node space of `layers`.
pub fn node_mixup(
    layers: &[Array2<f64>],
    user_nodes: &[usize],
    item_nodes: &[usize],
    alpha: &[f64],
) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((
        mix_rows(layers, user_nodes, |_| alpha)?,
        mix_rows(layers, item_nodes, |_| alpha)?,
    ))
}

/// Edge-level mixup of row-aligned pairs with one `β` per row.
pub fn edge_mixup(
    users: &ArrayView2<f64>,
    items: &ArrayView2<f64>,
    betas: &[f64],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if users.dim() != items.dim() || betas.len() != users.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "edge mixup: users {:?}, items {:?}, {} betas",
            users.dim(),
            items.dim(),
            betas.len()
        )));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b <= MAX_BETA)) {
        return Err(Error::config(format!("edge mixup ratio {b} outside [0, 0.5]")));
    }
    let mut mixed_users = users.to_owned();
    let mut mixed_items = items.to_owned();
    for (t, &beta) in betas.iter().enumerate() {
        let (u, v) = (users.row(t), items.row(t));
        let mut mu = mixed_users.row_mut(t);
        mu *= 1.0 - beta;
        mu.scaled_add(beta, &v);
        let mut mv = mixed_items.row_mut(t);
        mv *= 1.0 - beta;
        mv.scaled_add(beta, &u);
    }
    Ok((mixed_users, mixed_items))
}

/// Layer weights of one NMix round.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerMix {
    Shared(Vec<f64>),
    PerNode {
        users: Vec<Vec<f64>>,
        items: Vec<Vec<f64>>,
    },
}

impl LayerMix {
    fn user_alpha(&self, row: usize) -> &[f64] {
        match self {
            LayerMix::Shared(a) => a,
            LayerMix::PerNode { users, .. } => &users[row],
        }
    }

    fn item_alpha(&self, row: usize) -> &[f64] {
        match self {
            LayerMix::Shared(a) => a,
            LayerMix::PerNode { items, .. } => &items[row],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixRound {
    pub layer_mix: LayerMix,
    pub betas: Vec<f64>,
}

/// All random draws of one batch's augmentation, kept so the same
/// augmentation can be replayed (finite-difference checks) and differentiated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixPlan {
    pub rounds: Vec<MixRound>,
}

impl MixPlan {
    pub fn sample<R: Rng + ?Sized>(cfg: &MixupConfig, batch_len: usize, n_layers: usize, rng: &mut R) -> Self {
        let rounds = (0..cfg.n_mix)
            .map(|_| {
                let layer_mix = match cfg.alpha_mode {
                    AlphaMode::Shared => LayerMix::Shared(sample_simplex_weights(n_layers, rng)),
                    AlphaMode::PerNode => LayerMix::PerNode {
                        users: (0..batch_len).map(|_| sample_simplex_weights(n_layers, rng)).collect(),
                        items: (0..batch_len).map(|_| sample_simplex_weights(n_layers, rng)).collect(),
                    },
                };
                let betas = (0..batch_len).map(|_| rng.random::<f64>() * cfg.beta_max).collect();
                MixRound { layer_mix, betas }
            })
            .collect();
        MixPlan { rounds }
    }
}

/// Original pairs followed by their virtual counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub user_rows: Array2<f64>,
    pub item_rows: Array2<f64>,
    user_nodes: Vec<usize>,
    item_nodes: Vec<usize>,
    plan: MixPlan,
}

impl AugmentedBatch {
    /// Applies `plan` to the pairs `(user_nodes[t], item_nodes[t])`.
    /// `final_emb` are the combined (unnormalised) embeddings.
    pub fn build(
        plan: MixPlan,
        layers: &[Array2<f64>],
        final_emb: &ArrayView2<f64>,
        user_nodes: &[usize],
        item_nodes: &[usize],
    ) -> Result<Self> {
        let b = user_nodes.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if item_nodes.len() != b || plan.rounds.iter().any(|r| r.betas.len() != b) {
            return Err(Error::ShapeMismatch("mixup plan does not match batch".into()));
        }
        check_nodes(user_nodes, final_emb.nrows())?;
        check_nodes(item_nodes, final_emb.nrows())?;
        let rows = b * (1 + 2 * plan.rounds.len());
        let d = final_emb.ncols();
        let mut user_rows = Array2::zeros((rows, d));
        let mut item_rows = Array2::zeros((rows, d));
        let users = crate::objectives::gather_rows(final_emb, user_nodes.iter().copied());
        let items = crate::objectives::gather_rows(final_emb, item_nodes.iter().copied());
        user_rows.slice_mut(ndarray::s![0..b, ..]).assign(&users);
        item_rows.slice_mut(ndarray::s![0..b, ..]).assign(&items);
        for (r, round) in plan.rounds.iter().enumerate() {
            let nmix = (1 + 2 * r) * b;
            let emix = nmix + b;
            let mu = mix_rows(layers, user_nodes, |t| round.layer_mix.user_alpha(t))?;
            let mv = mix_rows(layers, item_nodes, |t| round.layer_mix.item_alpha(t))?;
            user_rows.slice_mut(ndarray::s![nmix..nmix + b, ..]).assign(&mu);
            item_rows.slice_mut(ndarray::s![nmix..nmix + b, ..]).assign(&mv);
            let (eu, ev) = edge_mixup(&users.view(), &items.view(), &round.betas)?;
            user_rows.slice_mut(ndarray::s![emix..emix + b, ..]).assign(&eu);
            item_rows.slice_mut(ndarray::s![emix..emix + b, ..]).assign(&ev);
        }
        Ok(AugmentedBatch {
            user_rows,
            item_rows,
            user_nodes: user_nodes.to_vec(),
            item_nodes: item_nodes.to_vec(),
            plan,
        })
    }

    /// Number of original pairs `B`.
    pub fn batch_len(&self) -> usize {
        self.user_nodes.len()
    }

    pub fn len(&self) -> usize {
        self.user_rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row ranges of the `1 + 2·n_mix` blocks.
    pub fn blocks(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let b = self.batch_len();
        (0..self.len() / b).map(move |k| k * b..(k + 1) * b)
    }

    pub fn plan(&self) -> &MixPlan {
        &self.plan
    }

    /// Routes row gradients back to the combined embeddings (`grad_final`)
    /// and, for NMix rows, to the individual layers (`grad_layers`).
    pub fn backward(
        &self,
        grad_users: &ArrayView2<f64>,
        grad_items: &ArrayView2<f64>,
        grad_final: &mut Array2<f64>,
        grad_layers: &mut [Array2<f64>],
    ) -> Result<()> {
        if grad_users.dim() != self.user_rows.dim() || grad_items.dim() != self.item_rows.dim() {
            return Err(Error::ShapeMismatch("augmented gradient shape".into()));
        }
        let b = self.batch_len();
        for t in 0..b {
            let mut row = grad_final.row_mut(self.user_nodes[t]);
            row += &grad_users.row(t);
            let mut row = grad_final.row_mut(self.item_nodes[t]);
            row += &grad_items.row(t);
        }
        for (r, round) in self.plan.rounds.iter().enumerate() {
            let nmix = (1 + 2 * r) * b;
            let emix = nmix + b;
            for t in 0..b {
                let (ua, ia) = (round.layer_mix.user_alpha(t), round.layer_mix.item_alpha(t));
                if ua.len() != grad_layers.len() || ia.len() != grad_layers.len() {
                    return Err(Error::ShapeMismatch("one gradient buffer per layer required".into()));
                }
                for (k, layer_grad) in grad_layers.iter_mut().enumerate() {
                    layer_grad
                        .row_mut(self.user_nodes[t])
                        .scaled_add(ua[k], &grad_users.row(nmix + t));
                    layer_grad
                        .row_mut(self.item_nodes[t])
                        .scaled_add(ia[k], &grad_items.row(nmix + t));
                }
                let beta = round.betas[t];
                let (gu, gv) = (grad_users.row(emix + t), grad_items.row(emix + t));
                let mut row = grad_final.row_mut(self.user_nodes[t]);
                row.scaled_add(1.0 - beta, &gu);
                row.scaled_add(beta, &gv);
                let mut row = grad_final.row_mut(self.item_nodes[t]);
                row.scaled_add(beta, &gu);
                row.scaled_add(1.0 - beta, &gv);
            }
        }
        Ok(())
    }
}

/// Samples a plan from `rng` and applies it.
pub fn augment_batch<R: Rng + ?Sized>(
    user_nodes: &[usize],
    item_nodes: &[usize],
    layers: &[Array2<f64>],
    final_emb: &ArrayView2<f64>,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    let plan = MixPlan::sample(cfg, user_nodes.len(), layers.len(), rng);
    AugmentedBatch::build(plan, layers, final_emb, user_nodes, item_nodes)
}
