//! D-optimal progressive subset selection.
//!
//! A K-subset of primitives is scored by `log det(G[S])` where `G` is the
//! Gram matrix of the induced kernels: the determinant grows with per-kernel
//! energy and shrinks when kernels overlap, so maximizing it keeps influential
//! primitives while avoiding redundancy. With `G = D R D` the objective
//! splits into a per-primitive coverage sum and a coupled overlap term
//! `log det(R[S])`, which is approximated by the additive quadratic surrogate
//! `-1/2 sum R_ij^2` (with a provable remainder bound when `||R[S] - I|| < 1`).
//! Localizing the redundancy sum to k nearest neighbors gives the one-shot
//! ranking score `score_n = sx sy exp(-lambda rho_n)` used for transmission
//! ordering.

use thiserror::Error;

use crate::gaussian::{self, Gaussian2D};
use crate::grouping::ScaleGroup;
use crate::spatial::SpatialGrid;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("subset Gram matrix is singular or indefinite (duplicate primitives?)")]
    SingularSubset,
    #[error("budget {budget} exceeds available primitives {available}")]
    BudgetExceedsSet { budget: usize, available: usize },
    #[error("exhaustive search limited to 20 primitives, got {0}")]
    EnumerationTooLarge(usize),
    #[error("overlap surrogate needs ||R[S]-I|| < 1, got alpha = {alpha}")]
    SurrogateNotApplicable { alpha: f64 },
    #[error("subset index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("subset must be non-empty")]
    EmptySubset,
}

/// Gram matrix of kernel inner products with its correlation normalization
/// `R = D^{-1} G D^{-1}`.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    n: usize,
    g: Vec<f64>,
    r: Vec<f64>,
}

impl GramMatrix {
    pub fn from_entries(n: usize, g: Vec<f64>) -> Self {
        assert_eq!(g.len(), n * n);
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                r[i * n + j] = g[i * n + j] / (g[i * n + i] * g[j * n + j]).sqrt();
            }
        }
        Self { n, g, r }
    }

    /// Treat a correlation matrix (unit diagonal) as its own Gram matrix.
    pub fn from_correlation(n: usize, r: Vec<f64>) -> Self {
        assert_eq!(r.len(), n * n);
        Self { n, g: r.clone(), r }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn g(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.n + j]
    }

    #[inline]
    pub fn r(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n + j]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.g(i, i)
    }
}

/// Closed-form Gram matrix of a primitive set.
pub fn build_gram(gaussians: &[Gaussian2D]) -> GramMatrix {
    let n = gaussians.len();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        g[i * n + i] = gaussian::l2_norm_sq(&gaussians[i]);
        for j in i + 1..n {
            let e = gaussian::gram_entry(&gaussians[i], &gaussians[j]);
            g[i * n + j] = e;
            g[j * n + i] = e;
        }
    }
    GramMatrix::from_entries(n, g)
}

/// Rectangular sampling grid for the pixel-sum Gram oracle.
#[derive(Clone, Copy, Debug)]
pub struct PixelGrid {
    pub origin: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
}

impl PixelGrid {
    /// Grid covering every primitive out to `extent_sigmas` standard
    /// deviations, sampled at `min_sigma / spacing_divisor`.
    pub fn covering(gaussians: &[Gaussian2D], extent_sigmas: f64, spacing_divisor: f64) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut min_sigma = f64::INFINITY;
        for g in gaussians {
            let smax = gaussian::footprint_sigma_max(g, 1.0);
            let smin = gaussian::footprint_sigma_min(g, 1.0);
            min_sigma = min_sigma.min(smin);
            for k in 0..2 {
                lo[k] = lo[k].min(g.mu[k] as f64 - extent_sigmas * smax);
                hi[k] = hi[k].max(g.mu[k] as f64 + extent_sigmas * smax);
            }
        }
        let spacing = min_sigma / spacing_divisor;
        PixelGrid {
            origin: lo,
            nx: ((hi[0] - lo[0]) / spacing).ceil() as usize + 1,
            ny: ((hi[1] - lo[1]) / spacing).ceil() as usize + 1,
            spacing,
        }
    }
}

/// Pixel-sum Gram matrix `G_ij = sum_p phi_i(x_p) phi_j(x_p) * spacing^2`,
/// the discretized counterpart of the closed form. Slow; used as an oracle
/// for [`build_gram`] and to document discretization sensitivity.
pub fn empirical_gram(gaussians: &[Gaussian2D], grid: &PixelGrid) -> GramMatrix {
    let n = gaussians.len();
    // responses evaluated once per (primitive, sample)
    let samples = grid.nx * grid.ny;
    let mut phi = vec![0.0f64; n * samples];
    for (pi, g) in gaussians.iter().enumerate() {
        let row = &mut phi[pi * samples..(pi + 1) * samples];
        for iy in 0..grid.ny {
            let y = grid.origin[1] + iy as f64 * grid.spacing;
            for ix in 0..grid.nx {
                let x = grid.origin[0] + ix as f64 * grid.spacing;
                row[iy * grid.nx + ix] = gaussian::kernel_eval(g, [x, y]);
            }
        }
    }
    let area = grid.spacing * grid.spacing;
    let mut gm = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let a = &phi[i * samples..(i + 1) * samples];
            let b = &phi[j * samples..(j + 1) * samples];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            gm[i * n + j] = dot * area;
            gm[j * n + i] = dot * area;
        }
    }
    GramMatrix::from_entries(n, gm)
}

/// In-place lower Cholesky of a dense symmetric matrix; returns
/// `log det = 2 sum log L_ii` or failure for non-positive-definite input.
fn cholesky_logdet(a: &mut [f64], n: usize) -> Result<f64, PruneError> {
    let mut logdet = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(PruneError::SingularSubset);
                }
                let l = sum.sqrt();
                a[i * n + i] = l;
                logdet += 2.0 * l.ln();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    Ok(logdet)
}

fn gather_submatrix(m: &GramMatrix, subset: &[usize], correlation: bool) -> Vec<f64> {
    let k = subset.len();
    let mut sub = vec![0.0; k * k];
    for (ai, &i) in subset.iter().enumerate() {
        for (aj, &j) in subset.iter().enumerate() {
            sub[ai * k + aj] = if correlation { m.r(i, j) } else { m.g(i, j) };
        }
    }
    sub
}

fn check_subset(m: &GramMatrix, subset: &[usize]) -> Result<(), PruneError> {
    if subset.is_empty() {
        return Err(PruneError::EmptySubset);
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= m.len()) {
        return Err(PruneError::IndexOutOfRange(bad));
    }
    Ok(())
}

/// `log det(G[S])` via Cholesky; a singular/indefinite principal submatrix
/// (duplicate primitives) is reported as an error rather than -inf.
pub fn logdet_subset(m: &GramMatrix, subset: &[usize]) -> Result<f64, PruneError> {
    check_subset(m, subset)?;
    let mut sub = gather_submatrix(m, subset, false);
    cholesky_logdet(&mut sub, subset.len())
}

/// `log det(R[S])` for the correlation factor.
pub fn logdet_subset_correlation(m: &GramMatrix, subset: &[usize]) -> Result<f64, PruneError> {
    check_subset(m, subset)?;
    let mut sub = gather_submatrix(m, subset, true);
    cholesky_logdet(&mut sub, subset.len())
}

/// Exact D-optimal subset by enumeration of all C(N, K) candidates. Ties are
/// broken lexicographically (the first maximizer in lexicographic order
/// wins). Guarded to N <= 20.
pub fn brute_force_dopt(m: &GramMatrix, k: usize) -> Result<Vec<usize>, PruneError> {
    let n = m.len();
    if n > 20 {
        return Err(PruneError::EnumerationTooLarge(n));
    }
    if k > n {
        return Err(PruneError::BudgetExceedsSet {
            budget: k,
            available: n,
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if let Ok(ld) = logdet_subset(m, &idx) {
            let better = match &best {
                None => true,
                Some((b, _)) => ld > *b,
            };
            if better {
                best = Some((ld, idx.clone()));
            }
        }
        // advance to the next combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return best.map(|(_, s)| s).ok_or(PruneError::SingularSubset);
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Greedy max-marginal-gain selection for the same objective, using an
/// incrementally grown Cholesky factor. The marginal gain of candidate `j`
/// given factor `L` of `G[S]` is `log(G_jj - ||w||^2)` with `L w = G[S, j]`.
/// Deterministic tie-break by index.
pub fn greedy_dopt(m: &GramMatrix, k: usize) -> Result<Vec<usize>, PruneError> {
    let n = m.len();
    if k > n {
        return Err(PruneError::BudgetExceedsSet {
            budget: k,
            available: n,
        });
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    // row-major lower factor of G[chosen]
    let mut l: Vec<f64> = Vec::new();
    // cached solve vectors per candidate, extended as the factor grows
    let mut w: Vec<Vec<f64>> = vec![Vec::new(); n];
    for _ in 0..k {
        let s = chosen.len();
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if chosen.contains(&j) {
                continue;
            }
            // extend candidate's solve vector for the newest factor row
            while w[j].len() < s {
                let row = w[j].len();
                let mut sum = m.g(chosen[row], j);
                for t in 0..row {
                    sum -= l[row * k + t] * w[j][t];
                }
                w[j].push(sum / l[row * k + row]);
            }
            let gain = m.g(j, j) - w[j].iter().map(|v| v * v).sum::<f64>();
            if gain > 0.0 {
                let better = match best {
                    None => true,
                    Some((bg, _)) => gain > bg,
                };
                if better {
                    best = Some((gain, j));
                }
            }
        }
        let (gain, j) = best.ok_or(PruneError::SingularSubset)?;
        // grow the factor with the accepted candidate's row
        if l.len() < k * k {
            l.resize(k * k, 0.0);
        }
        for t in 0..s {
            l[s * k + t] = w[j][t];
        }
        l[s * k + s] = gain.sqrt();
        chosen.push(j);
        // invalidate nothing: existing prefixes of w stay valid for the grown factor
    }
    Ok(chosen)
}

/// Spectral norm of a symmetric matrix by power iteration on `A^2`
/// (eigenvalues of `A^2` are nonnegative, so the iteration cannot oscillate
/// between a +/- pair).
fn spectral_norm_sym(a: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let matvec = |v: &[f64], out: &mut [f64]| {
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += a[i * n + j] * v[j];
            }
            out[i] = s;
        }
    };
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 1e-3).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut tmp = vec![0.0; n];
    let mut lam2 = 0.0f64;
    for _ in 0..500 {
        matvec(&v, &mut tmp);
        let mut next = vec![0.0; n];
        matvec(&tmp, &mut next);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let prev = lam2;
        lam2 = norm;
        v = next;
        if (lam2 - prev).abs() <= 1e-13 * lam2.max(1.0) {
            break;
        }
    }
    lam2.sqrt()
}

/// `||R[S] - I||_2`: the overall overlap strength within a subset. This is
/// the `alpha` of the surrogate's precondition; values well below 1 mean the
/// quadratic surrogate is accurate.
pub fn overlap_alpha(m: &GramMatrix, subset: &[usize]) -> Result<f64, PruneError> {
    check_subset(m, subset)?;
    let k = subset.len();
    let mut a = gather_submatrix(m, subset, true);
    for i in 0..k {
        a[i * k + i] = 0.0;
    }
    Ok(spectral_norm_sym(&a, k))
}

/// Additive quadratic surrogate of `log det(R[S])` with its remainder bound:
///
/// ```text
/// approx = -1/2 sum_{i != j in S} R_ij^2
/// |log det(R[S]) - approx| <= alpha / (3 (1 - alpha)) * sum_{i != j} R_ij^2
/// ```
///
/// where `alpha = ||R[S] - I||_2` (computed by power iteration). Requires
/// `alpha < 1`.
pub fn surrogate_overlap(m: &GramMatrix, subset: &[usize]) -> Result<(f64, f64), PruneError> {
    check_subset(m, subset)?;
    let k = subset.len();
    let mut a = gather_submatrix(m, subset, true);
    for i in 0..k {
        a[i * k + i] = 0.0;
    }
    let alpha = spectral_norm_sym(&a, k);
    if alpha >= 1.0 {
        return Err(PruneError::SurrogateNotApplicable { alpha });
    }
    let sum_sq: f64 = a.iter().map(|v| v * v).sum();
    let approx = -0.5 * sum_sq;
    let bound = alpha / (3.0 * (1.0 - alpha)) * sum_sq;
    Ok((approx, bound))
}

/// Per-primitive transmission priority: descending score with index
/// tie-break. Top-K prefixes of `order` form the progressive stream order.
#[derive(Clone, Debug)]
pub struct PruneRanking {
    pub score: Vec<f64>,
    pub rho: Vec<f64>,
    pub order: Vec<usize>,
}

impl PruneRanking {
    /// Identity ranking for a set already stored in priority order.
    pub fn identity(n: usize) -> Self {
        Self {
            score: vec![0.0; n],
            rho: vec![0.0; n],
            order: (0..n).collect(),
        }
    }
}

/// One-shot ranking `score_n = sx sy exp(-lambda rho_n)` with the redundancy
/// `rho_n = sum_{j in K_n} R_nj^2` taken over the k nearest neighbors by
/// center distance (grid-accelerated, canonical-set-wide). Computed once on
/// the canonical set: covariances are time-invariant, so a single order
/// serves the whole GoP.
pub fn rank_primitives(gaussians: &[Gaussian2D], k_neighbors: usize, lambda: f64) -> PruneRanking {
    assert!(lambda >= 0.0);
    let n = gaussians.len();
    let mut rho = vec![0.0f64; n];
    if n > 1 && k_neighbors > 0 && lambda > 0.0 {
        let centers: Vec<[f64; 2]> = gaussians
            .iter()
            .map(|g| [g.mu[0] as f64, g.mu[1] as f64])
            .collect();
        let grid = SpatialGrid::build(&centers);
        for (i, r) in rho.iter_mut().enumerate() {
            for j in grid.knn_excluding(i, k_neighbors) {
                let c = gaussian::correlation_entry(&gaussians[i], &gaussians[j]);
                *r += c * c;
            }
        }
    }
    let score: Vec<f64> = gaussians
        .iter()
        .zip(&rho)
        .map(|(g, &r)| g.sx() * g.sy() * (-lambda * r).exp())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        score[b]
            .partial_cmp(&score[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    PruneRanking { score, rho, order }
}

/// Decode budget: an absolute primitive count or a fraction of the group.
#[derive(Clone, Copy, Debug)]
pub enum Budget {
    Count(usize),
    KeepRatio(f64),
}

impl Budget {
    pub fn resolve(&self, available: usize) -> usize {
        match *self {
            Budget::Count(k) => {
                if k > available {
                    log::warn!("budget {k} exceeds group size {available}; clamping");
                }
                k.min(available)
            }
            Budget::KeepRatio(q) => {
                let q = q.clamp(0.0, 1.0);
                (q * available as f64).round() as usize
            }
        }
    }
}

/// Top-K prefix of the ranking restricted to a scale group, in ranking order
/// (the decode order). Prefix property: smaller budgets are strict subsets of
/// larger ones.
pub fn prune_to_budget(group: &ScaleGroup, ranking: &PruneRanking, budget: Budget) -> Vec<usize> {
    let k = budget.resolve(group.len());
    let mut selected = Vec::with_capacity(k);
    for &idx in &ranking.order {
        if selected.len() == k {
            break;
        }
        if group.indices.binary_search(&idx).is_ok() {
            selected.push(idx);
        }
    }
    selected
}
