//! Training objectives with analytic gradients.
//!
//! Every loss here is a mean over batch rows. Gradients are returned w.r.t.
//! the rows that were passed in; chaining through normalisation, mixup and
//! propagation is the caller's job (see [`crate::trainer`]).

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows with a smaller norm are divided by this instead.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bpr,
    SslRec,
    Sgcl,
}

/// How the two contrastive views of the SSLRec baseline are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    /// Both views are the normalised final embedding.
    Identity,
    /// Each view adds a sign-aligned uniform perturbation of length `eps`
    /// to the normalised embedding and re-normalises.
    Noise { eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub temperature: f64,
    /// Weight of the contrastive term (SSLRec only).
    pub lambda: f64,
    /// SSLRec only.
    pub view_mode: ViewMode,
    /// Keep each pair's own `exp(uᵢ·uᵢ/τ)` and `exp(vⱼ·vⱼ/τ)` in the SGCL denominator.
    pub include_self_terms: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Sgcl,
            temperature: 0.2,
            lambda: 0.1,
            view_mode: ViewMode::Noise { eps: 0.1 },
            include_self_terms: true,
        }
    }
}

impl LossConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            out.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            out.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if let ViewMode::Noise { eps } = self.view_mode {
            if !(eps.is_finite() && eps >= 0.0) {
                out.push(format!("noise eps must be non-negative, got {eps}"));
            }
        }
        out
    }
}

/// Loss value plus gradients w.r.t. the user rows, the (positive) item rows
/// and, for pairwise losses, the negative item rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_users: Array2<f64>,
    pub grad_items: Array2<f64>,
    pub grad_negatives: Option<Array2<f64>>,
}

/// In-batch InfoNCE value with gradients w.r.t. both views.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub value: f64,
    pub grad_view1: Array2<f64>,
    pub grad_view2: Array2<f64>,
}

fn check_rows(what: &str, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean of `−ln σ(u·v⁺ − u·v⁻)` over rows.
pub fn bpr_loss(
    users: &ArrayView2<f64>,
    pos: &ArrayView2<f64>,
    neg: &ArrayView2<f64>,
) -> Result<LossOutput> {
    check_rows("bpr positives", users, pos)?;
    check_rows("bpr negatives", users, neg)?;
    let b = users.nrows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv_b = 1.0 / b as f64;
    let mut grad_users = Array2::zeros(users.raw_dim());
    let mut grad_items = Array2::zeros(users.raw_dim());
    let mut grad_negatives = Array2::zeros(users.raw_dim());
    let mut value = 0.0;
    for t in 0..b {
        let (u, p, n) = (users.row(t), pos.row(t), neg.row(t));
        let margin = u.dot(&p) - u.dot(&n);
        value += softplus(-margin);
        let coef = sigmoid(-margin) * inv_b;
        Zip::from(grad_users.row_mut(t))
            .and(&p)
            .and(&n)
            .for_each(|g, &pv, &nv| *g = -coef * (pv - nv));
        Zip::from(grad_items.row_mut(t)).and(&u).for_each(|g, &uv| *g = -coef * uv);
        Zip::from(grad_negatives.row_mut(t)).and(&u).for_each(|g, &uv| *g = coef * uv);
    }
    Ok(LossOutput {
        value: value * inv_b,
        grad_users,
        grad_items,
        grad_negatives: Some(grad_negatives),
    })
}

/// One-sided in-batch InfoNCE: row `t` of `view1` is pulled towards row `t`
/// of `view2` against every other row of `view2`. Mean over rows.
pub fn infonce_gcl_loss(
    view1: &ArrayView2<f64>,
    view2: &ArrayView2<f64>,
    temperature: f64,
) -> Result<InfoNceOutput> {
    check_rows("infonce views", view1, view2)?;
    let b = view1.nrows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv_t = 1.0 / temperature;
    let mut sim = view1.dot(&view2.t());
    sim *= inv_t;
    let mut value = 0.0;
    // sim becomes softmax(sim) - I
    for (t, mut row) in sim.axis_iter_mut(Axis(0)).enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        value += lse - row[t];
        row.mapv_inplace(|s| (s - lse).exp());
        row[t] -= 1.0;
    }
    let scale = inv_t / b as f64;
    let grad_view1 = sim.dot(view2) * scale;
    let grad_view2 = sim.t().dot(view1) * scale;
    Ok(InfoNceOutput {
        value: value / b as f64,
        grad_view1,
        grad_view2,
    })
}

/// Row-wise L2 normalisation. Returns the normalised rows and the norms used.
pub fn l2_normalize_rows(x: &ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        row /= n;
        norms.push(n);
    }
    (out, norms)
}

/// Adjoint of [`l2_normalize_rows`]: `(g − x̂ (x̂·g)) / ‖x‖`.
pub fn l2_normalize_backward(
    normalized: &ArrayView2<f64>,
    norms: &[f64],
    grad: &ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = grad.to_owned();
    for ((mut g, xh), &n) in out.axis_iter_mut(Axis(0)).zip(normalized.rows()).zip(norms) {
        if n > NORM_EPS {
            let proj = xh.dot(&g);
            g.scaled_add(-proj, &xh);
        }
        g /= n;
    }
    out
}

/// Uniform `[0, 1)` draws that define the two perturbed views of users and items.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub users: [Array2<f64>; 2],
    pub items: [Array2<f64>; 2],
}

impl NoiseDraws {
    pub fn sample<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let mut draw = || Array2::from_shape_simple_fn((rows, dim), || rng.random::<f64>());
        NoiseDraws {
            users: [draw(), draw()],
            items: [draw(), draw()],
        }
    }
}

/// Contrastive views for [`sslrec_loss`].
#[derive(Debug, Clone, Copy)]
pub enum Views<'a> {
    Identity,
    Noise { eps: f64, draws: &'a NoiseDraws },
}

struct ViewPair {
    normalized: Array2<f64>,
    norms: Vec<f64>,
    /// Perturbed-and-renormalised views; `None` for identity.
    perturbed: Option<[(Array2<f64>, Vec<f64>); 2]>,
}

impl ViewPair {
    fn new(x: &ArrayView2<f64>, noise: Option<(f64, &[Array2<f64>; 2])>) -> Result<Self> {
        let (normalized, norms) = l2_normalize_rows(x);
        let perturbed = match noise {
            None => None,
            Some((eps, draws)) => {
                let make = |draw: &Array2<f64>| -> Result<(Array2<f64>, Vec<f64>)> {
                    if draw.dim() != normalized.dim() {
                        return Err(Error::ShapeMismatch("noise draws do not match batch".into()));
                    }
                    let mut y = normalized.clone();
                    for ((mut yr, xr), dr) in y.rows_mut().into_iter().zip(normalized.rows()).zip(draw.rows()) {
                        let dn = dr.dot(&dr).sqrt().max(NORM_EPS);
                        Zip::from(&mut yr)
                            .and(&xr)
                            .and(&dr)
                            .for_each(|y, &xv, &dv| *y += eps * xv.signum() * dv / dn);
                    }
                    Ok(l2_normalize_rows(&y.view()))
                };
                Some([make(&draws[0])?, make(&draws[1])?])
            }
        };
        Ok(ViewPair {
            normalized,
            norms,
            perturbed,
        })
    }

    fn views(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        match &self.perturbed {
            None => (self.normalized.view(), self.normalized.view()),
            Some([a, b]) => (a.0.view(), b.0.view()),
        }
    }

    /// Maps gradients on the two views back to the raw rows.
    fn backward(&self, g1: &Array2<f64>, g2: &Array2<f64>) -> Array2<f64> {
        let g_normalized = match &self.perturbed {
            None => g1 + g2,
            Some([a, b]) => {
                // the additive noise is constant in x̂ (sign is piecewise constant)
                l2_normalize_backward(&a.0.view(), &a.1, &g1.view())
                    + l2_normalize_backward(&b.0.view(), &b.1, &g2.view())
            }
        };
        l2_normalize_backward(&self.normalized.view(), &self.norms, &g_normalized.view())
    }
}

/// Joint SSLRec objective: `bpr + λ (L_user + L_item)`.
///
/// BPR sees the raw rows. Each contrastive side builds two views of its
/// rows according to `views` (L2-normalised), then applies
/// [`infonce_gcl_loss`]. The user side contrasts batch users; the item side
/// contrasts the positive items.
pub fn sslrec_loss(
    users: &ArrayView2<f64>,
    pos: &ArrayView2<f64>,
    neg: &ArrayView2<f64>,
    temperature: f64,
    lambda: f64,
    views: Views<'_>,
) -> Result<LossOutput> {
    let mut out = bpr_loss(users, pos, neg)?;
    if lambda == 0.0 {
        return Ok(out);
    }
    let (user_noise, item_noise) = match views {
        Views::Identity => (None, None),
        Views::Noise { eps, draws } => (Some((eps, &draws.users)), Some((eps, &draws.items))),
    };
    for (rows, noise, grad) in [
        (users, user_noise, &mut out.grad_users),
        (pos, item_noise, &mut out.grad_items),
    ] {
        let pair = ViewPair::new(rows, noise)?;
        let (v1, v2) = pair.views();
        let side = infonce_gcl_loss(&v1, &v2, temperature)?;
        out.value += lambda * side.value;
        grad.scaled_add(lambda, &pair.backward(&side.grad_view1, &side.grad_view2));
    }
    Ok(out)
}

struct SgclTerms {
    per_pair: Vec<f64>,
    /// `exp(uᵢ·u_{i'}/τ) / Dᵢ`
    user_weights: Array2<f64>,
    item_weights: Array2<f64>,
}

fn sgcl_terms(
    users: &ArrayView2<f64>,
    items: &ArrayView2<f64>,
    temperature: f64,
    include_self_terms: bool,
) -> Result<SgclTerms> {
    check_rows("sgcl pairs", users, items)?;
    let b = users.nrows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if b == 1 && !include_self_terms {
        return Err(Error::config(
            "a batch of one pair has an empty denominator when self terms are excluded",
        ));
    }
    let inv_t = 1.0 / temperature;
    let mut uu = users.dot(&users.t());
    uu *= inv_t;
    let mut vv = items.dot(&items.t());
    vv *= inv_t;
    let mut per_pair = Vec::with_capacity(b);
    for t in 0..b {
        let mut urow = uu.row_mut(t);
        let mut vrow = vv.row_mut(t);
        if !include_self_terms {
            urow[t] = f64::NEG_INFINITY;
            vrow[t] = f64::NEG_INFINITY;
        }
        let m = urow.iter().chain(vrow.iter()).fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let mut denom = 0.0;
        for x in urow.iter_mut().chain(vrow.iter_mut()) {
            *x = (*x - m).exp();
            denom += *x;
        }
        let positive = users.row(t).dot(&items.row(t)) * inv_t;
        per_pair.push(m + denom.ln() - positive);
        let inv = 1.0 / denom;
        urow *= inv;
        vrow *= inv;
    }
    Ok(SgclTerms {
        per_pair,
        user_weights: uu,
        item_weights: vv,
    })
}

/// Supervised graph contrastive loss over row-aligned positive pairs.
///
/// For pair `t`: `−ln [ exp(u_t·v_t/τ) / Σ_{t'} (exp(u_t·u_{t'}/τ) + exp(v_t·v_{t'}/τ)) ]`,
/// averaged over the batch. No negatives are sampled.
pub fn sgcl_loss(users: &ArrayView2<f64>, items: &ArrayView2<f64>, temperature: f64) -> Result<LossOutput> {
    sgcl_loss_with(users, items, temperature, true)
}

/// `m ← m + mᵀ` for a square matrix, walked in tiles to stay cache friendly.
fn symmetrize_in_place(m: &mut Array2<f64>) {
    const TILE: usize = 64;
    let n = m.nrows();
    for bi in (0..n).step_by(TILE) {
        for bj in (bi..n).step_by(TILE) {
            for i in bi..(bi + TILE).min(n) {
                let start = if bi == bj { i } else { bj };
                for j in start..(bj + TILE).min(n) {
                    let s = m[[i, j]] + m[[j, i]];
                    m[[i, j]] = s;
                    m[[j, i]] = s;
                }
            }
        }
    }
}

pub fn sgcl_loss_with(
    users: &ArrayView2<f64>,
    items: &ArrayView2<f64>,
    temperature: f64,
    include_self_terms: bool,
) -> Result<LossOutput> {
    let terms = sgcl_terms(users, items, temperature, include_self_terms)?;
    let b = users.nrows() as f64;
    let scale = 1.0 / (b * temperature);
    let SgclTerms {
        per_pair,
        user_weights: mut p,
        item_weights: mut q,
    } = terms;
    symmetrize_in_place(&mut p);
    symmetrize_in_place(&mut q);
    let mut grad_users = p.dot(users) - items;
    grad_users *= scale;
    let mut grad_items = q.dot(items) - users;
    grad_items *= scale;
    Ok(LossOutput {
        value: per_pair.iter().sum::<f64>() / b,
        grad_users,
        grad_items,
        grad_negatives: None,
    })
}

/// Per-pair SGCL values (self terms included), before the batch mean.
pub fn sgcl_pair_losses(users: &ArrayView2<f64>, items: &ArrayView2<f64>, temperature: f64) -> Result<Vec<f64>> {
    Ok(sgcl_terms(users, items, temperature, true)?.per_pair)
}

/// `ln(2B) − 2/τ`: no pair of unit-norm rows can score below this.
pub fn sgcl_pair_lower_bound(batch_size: usize, temperature: f64) -> f64 {
    (2.0 * batch_size as f64).ln() - 2.0 / temperature
}

/// Batch mean of `ln Σ_{t'} (exp(u_t·u_{t'}/τ) + exp(v_t·v_{t'}/τ)) − 1/τ`.
///
/// For unit-norm rows the SGCL loss is never below this, with equality when
/// every pair satisfies `u_t·v_t = 1`.
pub fn sgcl_alignment_bound(users: &ArrayView2<f64>, items: &ArrayView2<f64>, temperature: f64) -> Result<f64> {
    check_rows("sgcl pairs", users, items)?;
    let b = users.nrows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv_t = 1.0 / temperature;
    let uu = users.dot(&users.t()) * inv_t;
    let vv = items.dot(&items.t()) * inv_t;
    let total: f64 = (0..b)
        .map(|t| log_sum_exp(uu.row(t).iter().chain(vv.row(t).iter()).copied()) - inv_t)
        .sum();
    Ok(total / b as f64)
}

/// Batch mean of the SSLRec bound with identity views:
/// `ln(e + exp(u·v⁻)) + λ ln Σ exp(u·u'/τ) + λ ln Σ exp(v·v'/τ) − (τ + 2λ)/τ`.
///
/// For unit-norm rows `sslrec_loss` with [`Views::Identity`] is never below
/// this, with equality when every pair satisfies `u·v = 1`.
pub fn sslrec_alignment_bound(
    users: &ArrayView2<f64>,
    pos: &ArrayView2<f64>,
    neg: &ArrayView2<f64>,
    temperature: f64,
    lambda: f64,
) -> Result<f64> {
    check_rows("bpr positives", users, pos)?;
    check_rows("bpr negatives", users, neg)?;
    let b = users.nrows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv_t = 1.0 / temperature;
    let uu = users.dot(&users.t()) * inv_t;
    let vv = pos.dot(&pos.t()) * inv_t;
    let total: f64 = (0..b)
        .map(|t| {
            let un = users.row(t).dot(&neg.row(t));
            log_sum_exp([1.0, un].into_iter())
                + lambda * log_sum_exp(uu.row(t).iter().copied())
                + lambda * log_sum_exp(vv.row(t).iter().copied())
                - (temperature + 2.0 * lambda) / temperature
        })
        .sum();
    Ok(total / b as f64)
}

/// Gathers rows `idx` of `m` into a new matrix.
pub fn gather_rows(m: &ArrayView2<f64>, idx: impl IntoIterator<Item = usize>) -> Array2<f64> {
    let idx: Vec<usize> = idx.into_iter().collect();
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(&idx) {
        dst.assign(&m.row(i));
    }
    out
}

/// Adds row `t` of `grad` into row `idx[t]` of `acc`.
pub fn scatter_add_rows(acc: &mut Array2<f64>, idx: impl IntoIterator<Item = usize>, grad: &ArrayView2<f64>) {
    for (i, g) in idx.into_iter().zip(grad.rows()) {
        let mut dst = acc.row_mut(i);
        dst += &g;
    }
}

/// Cosine similarity of two vectors; zero vectors give 0.
pub fn cosine(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}
