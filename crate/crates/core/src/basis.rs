//! Generating basis functions and their orthonormal reparameterization.
//!
//! A family of compactly supported generating basis functions (GBFs) ψ is not
//! itself an eigenfunction system. With the Gram matrix
//! `W_ij = ∫ ψ_i(s) ψ_j(s) ds` over the domain and its spectral decomposition
//! `W = P Λ Pᵀ`, the reweighted evaluator `ψ*(s)ᵀ = ψ(s)ᵀ P Λ^{-1/2}`
//! satisfies the orthonormality condition `FᵀWF = I`, so the truncated
//! expansion `ψ*(·)ᵀη` is a valid Karhunen-Loève expansion for any covariance
//! Q of η. Per-draw eigenfunction replicates come from the spectral
//! decomposition `Q = G Λ_Q Gᵀ`: the replicate evaluator is `s ↦ Gᵀψ*(s)`.
//!
//! W is estimated by seeded Monte Carlo over a uniform cloud on the domain
//! (regions are sample clouds, so no closed form exists); a midpoint
//! quadrature path exists for rectangle domains and serves as the exact
//! reference.

use crate::error::{CageError, Result};
use crate::geometry::{dist, PointSite, Rect, Region};
use crate::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Relative eigenvalue threshold below which a Gram matrix is declared
/// rank-deficient instead of being silently regularized.
pub const EPS_PD: f64 = 1e-10;

/// Knot centers plus a shared bandwidth.
#[derive(Debug, Clone)]
pub struct KnotSet {
    pub knots: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

impl KnotSet {
    pub fn new(knots: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if knots.is_empty() {
            return Err(CageError::Configuration("knot set is empty".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(CageError::Configuration(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let dim = knots[0].len();
        if knots.iter().any(|k| k.len() != dim) {
            return Err(CageError::Configuration("knots must share one dimension".into()));
        }
        Ok(KnotSet { knots, bandwidth })
    }

    /// Bandwidth rule: 1.5 times the smallest distance between two knots.
    pub fn with_bandwidth_rule(knots: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.5 * min_pairwise_distance(&knots)?;
        KnotSet::new(knots, w)
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(CageError::Configuration("need at least two knots for the bandwidth rule".into()));
    }
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = dist(&points[i], &points[j]);
            if d < best {
                best = d;
            }
        }
    }
    if !(best > 0.0) {
        return Err(CageError::Configuration("knots must be pairwise distinct".into()));
    }
    Ok(best)
}

/// Greedy max-min (coverage) subset of `r` knots from `candidates`, then the
/// 1.5x-smallest-distance bandwidth rule. The first knot is chosen uniformly
/// from the candidates by `seed`; each further knot maximizes the minimum
/// distance to those already chosen.
pub fn place_knots(candidates: &[Vec<f64>], r: usize, seed: u64) -> Result<KnotSet> {
    if r == 0 {
        return Err(CageError::Configuration("r must be >= 1".into()));
    }
    if r > candidates.len() {
        return Err(CageError::Configuration(format!(
            "requested r = {r} knots from only {} candidates",
            candidates.len()
        )));
    }
    if r == candidates.len() {
        return KnotSet::with_bandwidth_rule(candidates.to_vec());
    }
    let mut rng = rng::stream(seed, &[0x6b6e]);
    let first = rng.random_range(0..candidates.len());
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = candidates.iter().map(|c| dist(c, &candidates[first])).collect();
    while chosen.len() < r {
        let mut best = 0usize;
        let mut best_d = -1.0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist(&candidates[i], &candidates[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    KnotSet::with_bandwidth_rule(chosen.into_iter().map(|i| candidates[i].clone()).collect())
}

/// The shipped GBF kinds. Both are compactly supported on a disc of radius
/// equal to the bandwidth around each knot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GbfKind {
    Bisquare,
    Wendland,
}

#[derive(Debug, Clone)]
pub struct GbfFamily {
    pub kind: GbfKind,
    pub knots: KnotSet,
}

impl GbfFamily {
    pub fn new(kind: GbfKind, knots: KnotSet) -> Self {
        GbfFamily { kind, knots }
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    fn component(&self, d_over_w: f64) -> f64 {
        match self.kind {
            // {1 - (d/w)^2}^2 inside the support
            GbfKind::Bisquare => {
                let t = 1.0 - d_over_w * d_over_w;
                t * t
            }
            // (1-d)^6 (35d^2 + 18d + 3)/3 for 0 <= d <= 1
            GbfKind::Wendland => {
                let one_minus = 1.0 - d_over_w;
                let p6 = one_minus.powi(6);
                p6 * (35.0 * d_over_w * d_over_w + 18.0 * d_over_w + 3.0) / 3.0
            }
        }
    }

    /// Raw GBF vector at a point.
    pub fn eval(&self, s: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.eval_into(s, out.as_mut_slice());
        out
    }

    pub fn eval_into(&self, s: &[f64], out: &mut [f64]) {
        let w = self.knots.bandwidth;
        for (j, c) in self.knots.knots.iter().enumerate() {
            let d = dist(s, c);
            out[j] = if d <= w { self.component(d / w) } else { 0.0 };
        }
    }

    /// Nonzero components only, for compact-support accumulation loops.
    pub fn eval_sparse(&self, s: &[f64], buf: &mut Vec<(usize, f64)>) {
        buf.clear();
        let w = self.knots.bandwidth;
        for (j, c) in self.knots.knots.iter().enumerate() {
            let d = dist(s, c);
            if d <= w {
                let v = self.component(d / w);
                if v != 0.0 {
                    buf.push((j, v));
                }
            }
        }
    }
}

/// `W_ij = ∫ ψ_i ψ_j` over the domain, plus how it was estimated.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub w: DMatrix<f64>,
    /// Monte Carlo cloud size; 0 for the quadrature path.
    pub n_w_used: usize,
    pub domain_area: f64,
}

impl GramMatrix {
    /// Validates symmetry (enforced exactly by construction) and positive
    /// definiteness.
    pub fn new(w: DMatrix<f64>, n_w_used: usize, domain_area: f64) -> Result<Self> {
        if nalgebra::Cholesky::new(w.clone()).is_none() {
            return Err(CageError::DegenerateBasis(
                "Gram matrix is not positive definite; reduce r or enlarge the integration cloud"
                    .into(),
            ));
        }
        Ok(GramMatrix { w, n_w_used, domain_area })
    }

    pub fn rank(&self) -> usize {
        self.w.nrows()
    }
}

pub(crate) fn accumulate_gram<F>(
    r: usize,
    points: impl Iterator<Item = Vec<f64>>,
    weight_per_point: f64,
    mut eval_sparse: F,
) -> DMatrix<f64>
where
    F: FnMut(&[f64], &mut Vec<(usize, f64)>),
{
    let mut w = DMatrix::zeros(r, r);
    let mut buf: Vec<(usize, f64)> = Vec::with_capacity(r);
    for p in points {
        eval_sparse(&p, &mut buf);
        for a in 0..buf.len() {
            let (i, vi) = buf[a];
            for &(j, vj) in buf[a..].iter() {
                w[(i, j)] += vi * vj;
            }
        }
    }
    // mirror the upper triangle so symmetry holds exactly
    for i in 0..r {
        for j in 0..i {
            w[(i, j)] = w[(j, i)];
        }
    }
    w * weight_per_point
}

/// Monte Carlo Gram matrix: `W_im ≈ (|D|/n_w) Σ_k ψ_i(s_k) ψ_m(s_k)` over a
/// uniform cloud on the domain.
pub fn gram_matrix(family: &GbfFamily, mc_points: &[PointSite], domain_area: f64) -> Result<GramMatrix> {
    if mc_points.is_empty() {
        return Err(CageError::InvalidInput("Gram estimation needs a nonempty cloud".into()));
    }
    if !(domain_area > 0.0) {
        return Err(CageError::InvalidGeometry("domain area must be positive".into()));
    }
    let n = mc_points.len();
    let w = accumulate_gram(
        family.len(),
        mc_points.iter().map(|p| p.coords.clone()),
        domain_area / n as f64,
        |s, buf| family.eval_sparse(s, buf),
    );
    GramMatrix::new(w, n, domain_area)
}

/// Midpoint-rule Gram matrix over a 1-D or 2-D rectangle, `cells_per_dim`
/// nodes per axis. Exact reference for the Monte Carlo path.
pub fn gram_matrix_quadrature(family: &GbfFamily, rect: &Rect, cells_per_dim: usize) -> Result<GramMatrix> {
    if cells_per_dim == 0 {
        return Err(CageError::Configuration("quadrature grid must be >= 1 per dim".into()));
    }
    let dim = rect.dim();
    let volume = rect.volume();
    let n = cells_per_dim.pow(dim as u32);
    let cell_vol = volume / n as f64;
    let steps: Vec<f64> = (0..dim)
        .map(|d| (rect.max[d] - rect.min[d]) / cells_per_dim as f64)
        .collect();
    let points: Box<dyn Iterator<Item = Vec<f64>>> = match dim {
        1 => Box::new((0..cells_per_dim).map(move |i| vec![rect.min[0] + (i as f64 + 0.5) * steps[0]])),
        2 => {
            let (sx, sy) = (steps[0], steps[1]);
            let (mx, my) = (rect.min[0], rect.min[1]);
            Box::new((0..cells_per_dim).flat_map(move |iy| {
                (0..cells_per_dim)
                    .map(move |ix| vec![mx + (ix as f64 + 0.5) * sx, my + (iy as f64 + 0.5) * sy])
            }))
        }
        _ => {
            return Err(CageError::Configuration(
                "quadrature Gram path supports 1-D and 2-D rectangles".into(),
            ))
        }
    };
    let w = accumulate_gram(family.len(), points, cell_vol, |s, buf| family.eval_sparse(s, buf));
    GramMatrix::new(w, 0, volume)
}

/// Spectral decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and a deterministic sign convention: the largest-magnitude
/// entry of each eigenvector is positive.
pub(crate) fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let r = m.nrows();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut vectors = DMatrix::zeros(r, r);
    let mut values = DVector::zeros(r);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let mut best = 0usize;
        for i in 1..r {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..r {
            vectors[(i, dst)] = sign * col[i];
        }
    }
    (vectors, values)
}

/// Orthonormalized basis: raw GBFs plus the reweighting `P_W Λ_W^{-1/2}`.
#[derive(Debug, Clone)]
pub struct OcBasis {
    pub family: GbfFamily,
    /// `F = P_W Λ_W^{-1/2}`, satisfying `Fᵀ W F = I`.
    pub transform: DMatrix<f64>,
    pub gram: GramMatrix,
}

impl OcBasis {
    /// Builds the orthonormalizing transform from the Gram matrix spectrum.
    /// Fails when the smallest eigenvalue falls below `EPS_PD` relative to the
    /// largest, or when the orthonormality residual exceeds 1e-6.
    pub fn from_gram(family: GbfFamily, gram: GramMatrix) -> Result<Self> {
        if family.len() != gram.rank() {
            return Err(CageError::InvalidInput(format!(
                "family has {} functions but Gram matrix is {}x{}",
                family.len(),
                gram.rank(),
                gram.rank()
            )));
        }
        let (p, lambda) = sym_eigen_sorted(&gram.w);
        let lambda_max = lambda[0];
        if !(lambda_max > 0.0) {
            return Err(CageError::DegenerateBasis("Gram matrix has no positive spectrum".into()));
        }
        let r = gram.rank();
        let mut transform = p;
        for j in 0..r {
            if lambda[j] <= EPS_PD * lambda_max {
                return Err(CageError::DegenerateBasis(format!(
                    "Gram eigenvalue {} of {} is below the rank-deficiency threshold",
                    j + 1,
                    r
                )));
            }
            let scale = 1.0 / lambda[j].sqrt();
            for i in 0..r {
                transform[(i, j)] *= scale;
            }
        }
        let residual = orthonormality_residual(&transform, &gram.w);
        if residual > 1e-6 {
            return Err(CageError::DegenerateBasis(format!(
                "orthonormality residual {residual:.3e} exceeds 1e-6"
            )));
        }
        Ok(OcBasis { family, transform, gram })
    }

    pub fn rank(&self) -> usize {
        self.family.len()
    }

    /// `ψ*(s) = Fᵀ ψ(s)`.
    pub fn eval_point(&self, s: &[f64]) -> DVector<f64> {
        self.transform.tr_mul(&self.family.eval(s))
    }

    /// Mean of the raw GBF vector over a sample cloud, then the transform:
    /// the Monte Carlo estimate of `(1/|A|) ∫_A ψ*(s) ds`.
    pub fn eval_region(&self, region: &Region) -> Result<DVector<f64>> {
        self.eval_cloud(&region.samples)
    }

    pub fn eval_cloud(&self, samples: &[PointSite]) -> Result<DVector<f64>> {
        if samples.is_empty() {
            return Err(CageError::InvalidGeometry("region has an empty sample cloud".into()));
        }
        let mut raw = DVector::zeros(self.rank());
        let mut buf = Vec::with_capacity(self.rank());
        for p in samples {
            self.family.eval_sparse(&p.coords, &mut buf);
            for &(j, v) in &buf {
                raw[j] += v;
            }
        }
        raw /= samples.len() as f64;
        Ok(self.transform.tr_mul(&raw))
    }

    /// Rows of `ψ*(B_j)` for every unit of a fine support.
    pub fn eval_units(&self, fine: &crate::geometry::FineSupport) -> Result<DMatrix<f64>> {
        let r = self.rank();
        let mut m = DMatrix::zeros(fine.n_units(), r);
        for (row, unit) in fine.units.iter().enumerate() {
            let v = self.eval_cloud(&unit.samples)?;
            for j in 0..r {
                m[(row, j)] = v[j];
            }
        }
        Ok(m)
    }
}

pub fn orthonormality_residual(transform: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let prod = transform.tr_mul(w) * transform;
    let r = prod.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((prod[(i, j)] - target).abs());
        }
    }
    worst
}

/// One per-draw eigenfunction replicate: `Q = G Λ Gᵀ` with descending,
/// nonnegative eigenvalues. The replicate evaluator is `s ↦ Gᵀ ψ*(s)`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub g: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

pub fn eigen_replicate(q: &DMatrix<f64>) -> Result<EigenPair> {
    if q.nrows() != q.ncols() {
        return Err(CageError::InvalidInput("eigen_replicate needs a square matrix".into()));
    }
    let mut asym: f64 = 0.0;
    for i in 0..q.nrows() {
        for j in (i + 1)..q.ncols() {
            asym = asym.max((q[(i, j)] - q[(j, i)]).abs());
        }
    }
    if asym > 1e-8 {
        return Err(CageError::InvalidInput(format!(
            "matrix asymmetry {asym:.3e} exceeds 1e-8"
        )));
    }
    let (g, mut lambda) = sym_eigen_sorted(q);
    for v in lambda.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(EigenPair { g, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_region, RegionSpec};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn grid_candidates(n_per_dim: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for iy in 0..n_per_dim {
            for ix in 0..n_per_dim {
                out.push(vec![
                    (ix as f64 + 0.5) / n_per_dim as f64,
                    (iy as f64 + 0.5) / n_per_dim as f64,
                ]);
            }
        }
        out
    }

    #[test]
    fn place_knots_identity_when_r_equals_candidates() {
        let cands = grid_candidates(3);
        let ks = place_knots(&cands, 9, 1).unwrap();
        assert_eq!(ks.knots, cands);
        assert_abs_diff_eq!(ks.bandwidth, 1.5 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn place_knots_rejects_oversized_r() {
        let cands = grid_candidates(2);
        assert!(matches!(place_knots(&cands, 5, 1), Err(CageError::Configuration(_))));
    }

    #[test]
    fn max_min_selection_beats_random_subsets() {
        let mut r = rng::stream(99, &[]);
        let cands: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![r.random::<f64>(), r.random::<f64>()])
            .collect();
        let chosen = place_knots(&cands, 10, 5).unwrap();
        let chosen_min = min_pairwise_distance(&chosen.knots).unwrap();
        for trial in 0..50 {
            let mut tr = rng::stream(1000 + trial, &[]);
            let mut idx: Vec<usize> = (0..100).collect();
            for i in 0..10 {
                let j = tr.random_range(i..100);
                idx.swap(i, j);
            }
            let subset: Vec<Vec<f64>> = idx[..10].iter().map(|&i| cands[i].clone()).collect();
            let sub_min = min_pairwise_distance(&subset).unwrap();
            assert!(chosen_min >= sub_min, "random subset beat max-min: {sub_min} > {chosen_min}");
        }
    }

    #[test]
    fn bisquare_values() {
        let ks = KnotSet::new(vec![vec![0.0, 0.0]], 1.0).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        assert_abs_diff_eq!(fam.eval(&[0.0, 0.0])[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fam.eval(&[1.0, 0.0])[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fam.eval(&[0.5, 0.0])[0], 0.5625, epsilon = 1e-15);
        assert_abs_diff_eq!(fam.eval(&[1.5, 0.0])[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn wendland_values() {
        let ks = KnotSet::new(vec![vec![0.0, 0.0]], 1.0).unwrap();
        let fam = GbfFamily::new(GbfKind::Wendland, ks);
        assert_abs_diff_eq!(fam.eval(&[0.0, 0.0])[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fam.eval(&[1.0, 0.0])[0], 0.0, epsilon = 1e-15);
        // (0.5)^6 (35/4 + 9 + 3)/3
        assert_abs_diff_eq!(fam.eval(&[0.5, 0.0])[0], 0.015625 * 20.75 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn gram_of_constant_function_is_one() {
        // with a single function psi ≡ 1 on the unit square, W = [1] exactly
        let sq = Rect::unit_square();
        let pts = sample_region(&RegionSpec::Rect(&sq), 512, 3).unwrap();
        let w = accumulate_gram(
            1,
            pts.iter().map(|p| p.coords.clone()),
            1.0 / pts.len() as f64,
            |_, buf| {
                buf.clear();
                buf.push((0, 1.0));
            },
        );
        let gram = GramMatrix::new(w, pts.len(), 1.0).unwrap();
        assert_abs_diff_eq!(gram.w[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gram_is_permutation_invariant() {
        let ks = KnotSet::with_bandwidth_rule(grid_candidates(3)).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        let sq = Rect::unit_square();
        let pts = sample_region(&RegionSpec::Rect(&sq), 2000, 8).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let a = gram_matrix(&fam, &pts, 1.0).unwrap();
        let b = gram_matrix(&fam, &rev, 1.0).unwrap();
        let diff = (&a.w - &b.w).abs().max();
        assert!(diff < 1e-12, "permutation changed W by {diff}");
    }

    #[test]
    fn gram_mc_matches_quadrature_in_1d() {
        let knots: Vec<Vec<f64>> = (0..4).map(|i| vec![0.2 + 0.2 * i as f64]).collect();
        let ks = KnotSet::with_bandwidth_rule(knots).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        let line = Rect::new(vec![0.0], vec![1.0]).unwrap();
        let exact = gram_matrix_quadrature(&fam, &line, 20_000).unwrap();
        let cloud = sample_region(&RegionSpec::Rect(&line), 1_000_000, 21).unwrap();
        let mc = gram_matrix(&fam, &cloud, 1.0).unwrap();
        let rel = (&mc.w - &exact.w).abs().max() / exact.w.abs().max();
        assert!(rel <= 1e-2, "relative Gram error {rel}");
    }

    #[test]
    fn oc_transform_identity_gram() {
        let ks = KnotSet::new(vec![vec![0.25, 0.5], vec![0.75, 0.5]], 0.3).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        let gram = GramMatrix::new(DMatrix::identity(2, 2), 0, 1.0).unwrap();
        let oc = OcBasis::from_gram(fam, gram).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(oc.transform[(i, j)].abs(), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oc_transform_diagonal_gram() {
        let ks = KnotSet::new(vec![vec![0.25, 0.5], vec![0.75, 0.5]], 0.3).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        let gram = GramMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])), 0, 1.0).unwrap();
        let oc = OcBasis::from_gram(fam, gram).unwrap();
        // descending eigenvalues: first column pairs with eigenvalue 4
        assert_abs_diff_eq!(oc.transform[(0, 0)].abs(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(oc.transform[(1, 1)].abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(oc.transform[(0, 1)].abs(), 0.0, epsilon = 1e-12);
        assert!(orthonormality_residual(&oc.transform, &oc.gram.w) <= 1e-12);
    }

    #[test]
    fn oc_residual_small_for_realistic_basis() {
        let cands = grid_candidates(10);
        let ks = place_knots(&cands, 25, 4).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        let gram = gram_matrix_quadrature(&fam, &Rect::unit_square(), 200).unwrap();
        let oc = OcBasis::from_gram(fam, gram).unwrap();
        assert!(orthonormality_residual(&oc.transform, &oc.gram.w) <= 1e-6);
    }

    #[test]
    fn eval_point_matches_explicit_product_and_compact_support() {
        let ks = KnotSet::with_bandwidth_rule(grid_candidates(3)).unwrap();
        let fam = GbfFamily::new(GbfKind::Wendland, ks);
        let gram = gram_matrix_quadrature(&fam, &Rect::unit_square(), 300).unwrap();
        let oc = OcBasis::from_gram(fam, gram).unwrap();
        let mut r = rng::stream(5, &[]);
        for _ in 0..20 {
            let s = vec![r.random::<f64>(), r.random::<f64>()];
            let fast = oc.eval_point(&s);
            let explicit = oc.transform.transpose() * oc.family.eval(&s);
            assert!((fast - explicit).abs().max() <= 1e-12);
        }
        // far outside every knot support
        let far = oc.eval_point(&[50.0, 50.0]);
        assert_eq!(far.abs().max(), 0.0);
    }

    #[test]
    fn eval_region_single_sample_equals_point_eval() {
        let ks = KnotSet::with_bandwidth_rule(grid_candidates(3)).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        let gram = gram_matrix_quadrature(&fam, &Rect::unit_square(), 200).unwrap();
        let oc = OcBasis::from_gram(fam, gram).unwrap();
        let region = Region {
            members: vec![0],
            area: 0.01,
            centroid: vec![0.4, 0.4],
            samples: vec![PointSite { coords: vec![0.4, 0.4] }],
        };
        let a = oc.eval_region(&region).unwrap();
        let b = oc.eval_point(&[0.4, 0.4]);
        assert!((a - b).abs().max() <= 1e-14);
    }

    #[test]
    fn eval_region_matches_quadrature_on_fine_cell() {
        let ks = KnotSet::with_bandwidth_rule(grid_candidates(3)).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        let gram = gram_matrix_quadrature(&fam, &Rect::unit_square(), 300).unwrap();
        let oc = OcBasis::from_gram(fam, gram).unwrap();

        let cell = Rect::new(vec![0.3, 0.3], vec![0.4, 0.4]).unwrap();
        let cloud = sample_region(&RegionSpec::Rect(&cell), 10_000, 13).unwrap();
        let region = Region { members: vec![0], area: 0.01, centroid: vec![0.35, 0.35], samples: cloud };
        let mc = oc.eval_region(&region).unwrap();

        // dense midpoint quadrature of the same mean
        let m = 400;
        let mut mean = DVector::zeros(oc.rank());
        for iy in 0..m {
            for ix in 0..m {
                let s = [
                    0.3 + (ix as f64 + 0.5) * 0.1 / m as f64,
                    0.3 + (iy as f64 + 0.5) * 0.1 / m as f64,
                ];
                mean += oc.eval_point(&s);
            }
        }
        mean /= (m * m) as f64;
        let err = (&mc - &mean).abs().max();
        assert!(err <= 1e-2 * mean.norm(), "cell mean error {err}");
    }

    #[test]
    fn aggregation_linearity_over_member_clouds() {
        // region eval over a concatenated cloud equals the area-weighted mean
        // of member evals when members have equal-sized clouds and equal areas
        let g = crate::geometry::build_grid(4, 4, &Rect::unit_square(), 25, 3).unwrap();
        let ks = KnotSet::with_bandwidth_rule(grid_candidates(3)).unwrap();
        let fam = GbfFamily::new(GbfKind::Bisquare, ks);
        let gram = gram_matrix_quadrature(&fam, &Rect::unit_square(), 200).unwrap();
        let oc = OcBasis::from_gram(fam, gram).unwrap();
        let p = crate::geometry::Partition::from_labels(&[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        let regions = crate::geometry::merge_regions(&g, &p).unwrap();
        for region in &regions {
            let whole = oc.eval_region(region).unwrap();
            let mut weighted = DVector::zeros(oc.rank());
            for &h in &region.members {
                weighted += oc.eval_cloud(&g.units[h].samples).unwrap() * g.units[h].area;
            }
            weighted /= region.area;
            assert!((whole - weighted).abs().max() <= 1e-12);
        }
    }

    #[test]
    fn eigen_replicate_cases() {
        let q = DMatrix::identity(3, 3);
        let ep = eigen_replicate(&q).unwrap();
        assert!((ep.g.transpose() * &ep.g - DMatrix::identity(3, 3)).abs().max() <= 1e-10);
        for v in ep.lambda.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }

        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let ep = eigen_replicate(&q).unwrap();
        assert_abs_diff_eq!(ep.lambda[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ep.lambda[1], 1.0, epsilon = 1e-12);

        // random PSD reconstruction
        let mut r = rng::stream(31, &[]);
        let a = DMatrix::from_fn(5, 5, |_, _| r.random::<f64>() - 0.5);
        let q = &a * a.transpose();
        let ep = eigen_replicate(&q).unwrap();
        let rebuilt = &ep.g * DMatrix::from_diagonal(&ep.lambda) * ep.g.transpose();
        assert!((rebuilt - &q).abs().max() <= 1e-10);
        for i in 1..5 {
            assert!(ep.lambda[i] <= ep.lambda[i - 1]);
            assert!(ep.lambda[i] >= 0.0);
        }

        // asymmetric input rejected
        let mut bad = q.clone();
        bad[(0, 1)] += 1e-4;
        assert!(eigen_replicate(&bad).is_err());
    }
}
