//! Two-stage regionalization search.
//!
//! Stage one clusters each retained posterior draw of the latent fine-support
//! field into candidate partitions: for draw m and cluster count k, the
//! feature rows are `[centroid | Y_B[m]]` (standardized by default) and the
//! clustering is either seeded k-means or contiguity-constrained Ward
//! agglomeration. The candidate set has one partition per `(k, m)` pair with
//! `k = g_L..g_U`.
//!
//! Stage two evaluates the average criterion `(1/k) Σ_ℓ DCAGE(C_ℓ)` of every
//! candidate over ALL retained draws and keeps the argmin, breaking ties by
//! smaller k then smaller draw index.

use crate::cage::{CageKind, CriterionContext};
use crate::basis::OcBasis;
use crate::error::{CageError, Result};
use crate::geometry::{contiguity_check, FineSupport, Partition};
use crate::inference::PosteriorDraws;
use crate::rng;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterAlgorithm {
    KMeans,
    /// Structural hierarchical clustering: Ward merges restricted to
    /// adjacency-linked clusters, so every region is contiguous.
    Shc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScaling {
    /// Each feature column to zero mean and unit variance before clustering.
    Standardize,
    Raw,
}

/// How candidate-region basis integrals `ψ*(C)` are obtained during stage
/// two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionIntegration {
    /// Area-weighted mean of the member rows `ψ*(B_h)`. Exact: singleton
    /// regions score zero and the variance identity holds, but the average
    /// criterion then decreases monotonically in k, so the search degenerates
    /// to `g_U`.
    MemberMean,
    /// Fresh uniform Monte Carlo cloud of `n_w` points per candidate region
    /// (grid-backed supports only). The integration error acts as a
    /// small-region penalty.
    Resample { n_w: usize },
    /// Evaluate regions through the variance decomposition
    /// `Σ_h var(Y_B_h)/|C| − var(Y_C)` instead of the squared-difference
    /// form. Identical under the counting-measure convention; under Lebesgue
    /// areas it keeps a per-unit variance floor that penalizes over-fine
    /// supports, so the search settles on an interior region count.
    VarianceForm,
}

/// Search configuration for the two-stage algorithm.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub g_l: usize,
    pub g_u: usize,
    pub algorithm: ClusterAlgorithm,
    pub feature_scaling: FeatureScaling,
    pub criterion: CageKind,
    pub region_integration: RegionIntegration,
    pub seed: u64,
    /// Independent k-means starts per candidate; the lowest-cost run wins.
    pub restarts: usize,
}

impl SearchConfig {
    pub fn new(g_l: usize, g_u: usize, seed: u64) -> Self {
        SearchConfig {
            g_l,
            g_u,
            algorithm: ClusterAlgorithm::KMeans,
            feature_scaling: FeatureScaling::Standardize,
            criterion: CageKind::Dcage,
            region_integration: RegionIntegration::MemberMean,
            seed,
            restarts: 1,
        }
    }

    fn validate(&self, n_b: usize) -> Result<()> {
        if self.g_l < 2 || self.g_l > self.g_u || self.g_u > n_b.saturating_sub(1) {
            return Err(CageError::Configuration(format!(
                "need 2 <= g_L <= g_U <= n_B - 1; got g_L = {}, g_U = {}, n_B = {n_b}",
                self.g_l, self.g_u
            )));
        }
        if self.restarts == 0 {
            return Err(CageError::Configuration("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One stage-one output: the partition from draw `m` at cluster count `k`.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub partition: Partition,
    pub k: usize,
    pub m: usize,
}

/// A scored candidate.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CandidateScore {
    pub k: usize,
    pub m: usize,
    pub avg_criterion: f64,
}

/// The argmin candidate plus the full audit table.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub optimal: Candidate,
    pub optimal_avg: f64,
    pub all: Vec<CandidateScore>,
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd k-means with distance-weighted (k-means++ style) seeding. Empty
/// clusters are re-seeded from the point farthest from its center. Stops when
/// assignments stabilize or after 300 sweeps.
pub fn kmeans(features: &DMatrix<f64>, k: usize, seed: u64) -> Result<Partition> {
    let n = features.nrows();
    let d = features.ncols();
    if k == 0 || k > n {
        return Err(CageError::Configuration(format!("k = {k} must lie in 1..={n}")));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| features.row(i).iter().copied().collect()).collect();
    let mut rng = rng::stream(seed, &[0x6b6d]);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(rows[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = rows.iter().map(|p| squared_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a center; pick arbitrarily
            rng.random_range(0..n)
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(rows[next].clone());
        for (i, p) in rows.iter().enumerate() {
            let nd = squared_dist(p, centers.last().unwrap());
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for _sweep in 0..300 {
        let mut changed = false;
        for (i, p) in rows.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist = squared_dist(p, center);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        // recompute centers; re-seed empties from the farthest point
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; d]; k];
        for (i, p) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, x) in sums[assign[i]].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = squared_dist(&rows[a], &centers[assign[a]]);
                        let db = squared_dist(&rows[b], &centers[assign[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers[c] = rows[far].clone();
                assign[far] = c;
                changed = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centers[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(Partition::from_labels(&assign))
}

fn kmeans_cost(features: &DMatrix<f64>, partition: &Partition) -> f64 {
    let n = features.nrows();
    let d = features.ncols();
    let k = partition.k();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let l = partition.assignment()[i];
        counts[l] += 1;
        for j in 0..d {
            sums[l][j] += features[(i, j)];
        }
    }
    let mut cost = 0.0;
    for i in 0..n {
        let l = partition.assignment()[i];
        for j in 0..d {
            let c = sums[l][j] / counts[l] as f64;
            let diff = features[(i, j)] - c;
            cost += diff * diff;
        }
    }
    cost
}

fn kmeans_best_of(features: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Result<Partition> {
    let mut best: Option<(f64, Partition)> = None;
    for t in 0..restarts {
        let p = kmeans(features, k, rng::derive_seed(seed, &[0x7274, t as u64]))?;
        let cost = kmeans_cost(features, &p);
        if best.as_ref().map(|(c, _)| cost < *c).unwrap_or(true) {
            best = Some((cost, p));
        }
    }
    Ok(best.unwrap().1)
}

/// Agglomerative Ward clustering in which only adjacency-linked clusters may
/// merge, stopped at `k` clusters. Every returned region is contiguous.
pub fn shc(features: &DMatrix<f64>, fine: &FineSupport, k: usize) -> Result<Partition> {
    let n = features.nrows();
    if n != fine.n_units() {
        return Err(CageError::InvalidInput("feature rows must cover the support".into()));
    }
    if k == 0 || k > n {
        return Err(CageError::Configuration(format!("k = {k} must lie in 1..={n}")));
    }
    let d = features.ncols();
    // active cluster state
    let mut alive: Vec<bool> = vec![true; n];
    let mut size: Vec<f64> = vec![1.0; n];
    let mut centroid: Vec<Vec<f64>> = (0..n).map(|i| features.row(i).iter().copied().collect()).collect();
    let mut neighbors: Vec<std::collections::BTreeSet<usize>> = (0..n)
        .map(|i| fine.adjacency.neighbors(i).iter().copied().collect())
        .collect();
    let mut member_label: Vec<usize> = (0..n).collect();
    let mut n_clusters = n;

    while n_clusters > k {
        // Ward linkage: d(a,b) = |a||b|/(|a|+|b|) * ||mean_a - mean_b||^2
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            for &b in neighbors[a].iter() {
                if b <= a || !alive[b] {
                    continue;
                }
                let w = size[a] * size[b] / (size[a] + size[b]);
                let dist = w * squared_dist(&centroid[a], &centroid[b]);
                if best.map(|(bd, _, _)| dist < bd).unwrap_or(true) {
                    best = Some((dist, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else {
            return Err(CageError::InfeasibleContiguity(format!(
                "no adjacent clusters left to merge at {n_clusters} > k = {k}"
            )));
        };
        // merge b into a
        let total = size[a] + size[b];
        for j in 0..d {
            centroid[a][j] = (size[a] * centroid[a][j] + size[b] * centroid[b][j]) / total;
        }
        size[a] = total;
        alive[b] = false;
        let moved: Vec<usize> = neighbors[b].iter().copied().collect();
        for nb in moved {
            neighbors[nb].remove(&b);
            if nb != a {
                neighbors[nb].insert(a);
                neighbors[a].insert(nb);
            }
        }
        neighbors[a].remove(&a);
        neighbors[a].remove(&b);
        for l in member_label.iter_mut() {
            if *l == b {
                *l = a;
            }
        }
        n_clusters -= 1;
    }
    Ok(Partition::from_labels(&member_label))
}

fn cluster_features(
    fine: &FineSupport,
    y_b: &nalgebra::DVector<f64>,
    scaling: FeatureScaling,
) -> DMatrix<f64> {
    let n = fine.n_units();
    let d = fine.bbox.dim();
    let mut features = DMatrix::zeros(n, d + 1);
    for (i, unit) in fine.units.iter().enumerate() {
        for j in 0..d {
            features[(i, j)] = unit.centroid[j];
        }
        features[(i, d)] = y_b[i];
    }
    if scaling == FeatureScaling::Standardize {
        for j in 0..d + 1 {
            let mut col = features.column_mut(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 1e-12 {
                for x in col.iter_mut() {
                    *x = (*x - mean) / sd;
                }
            } else {
                for x in col.iter_mut() {
                    *x -= mean;
                }
            }
        }
    }
    features
}

/// Stage one: `M (g_U - g_L + 1)` candidate partitions, one per `(k, m)`
/// pair, each clustered with a seed derived from `(config.seed, k, m)`.
pub fn candidates(
    draws: &PosteriorDraws,
    fine: &FineSupport,
    config: &SearchConfig,
) -> Result<Vec<Candidate>> {
    config.validate(fine.n_units())?;
    if draws.m == 0 {
        return Err(CageError::InsufficientDraws("candidate generation needs draws".into()));
    }
    let feature_sets: Vec<DMatrix<f64>> = (0..draws.m)
        .map(|m| cluster_features(fine, &draws.y_b[m], config.feature_scaling))
        .collect();
    let pairs: Vec<(usize, usize)> = (config.g_l..=config.g_u)
        .flat_map(|k| (0..draws.m).map(move |m| (k, m)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(k, m)| {
            let partition = match config.algorithm {
                ClusterAlgorithm::KMeans => kmeans_best_of(
                    &feature_sets[m],
                    k,
                    rng::derive_seed(config.seed, &[k as u64, m as u64]),
                    config.restarts,
                )?,
                ClusterAlgorithm::Shc => shc(&feature_sets[m], fine, k)?,
            };
            Ok(Candidate { partition, k, m })
        })
        .collect()
}

/// Stage two: evaluates the average criterion of every candidate over all
/// retained draws and returns the argmin (ties: smaller k, then smaller m).
/// Region integrals come from the exact member means; see
/// [`select_optimal_with`] for the resampling variant.
pub fn select_optimal(
    candidates: Vec<Candidate>,
    draws: &PosteriorDraws,
    oc: &OcBasis,
    fine: &FineSupport,
    criterion: CageKind,
) -> Result<SearchResult> {
    select_optimal_with(candidates, draws, oc, fine, criterion, RegionIntegration::MemberMean, 0)
}

/// [`select_optimal`] with an explicit region-integration mode. Resampling
/// seeds are derived from `(seed, k, m)` so reruns are bitwise identical.
pub fn select_optimal_with(
    candidates: Vec<Candidate>,
    draws: &PosteriorDraws,
    oc: &OcBasis,
    fine: &FineSupport,
    criterion: CageKind,
    integration: RegionIntegration,
    seed: u64,
) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(CageError::InvalidInput("no candidates to select from".into()));
    }
    let mut context = CriterionContext::new(draws, oc, fine)?;
    if criterion == CageKind::Cage && integration == RegionIntegration::MemberMean {
        context = context.with_point_terms(oc, fine)?;
    }
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|cand| {
            let report = match (criterion, integration) {
                (CageKind::Dcage, RegionIntegration::MemberMean) => context.dcage(&cand.partition)?,
                (CageKind::Cage, RegionIntegration::MemberMean) => context.cage(&cand.partition)?,
                (CageKind::Dcage, RegionIntegration::Resample { n_w }) => context.dcage_resampled(
                    &cand.partition,
                    oc,
                    fine,
                    n_w,
                    rng::derive_seed(seed, &[0x6576, cand.k as u64, cand.m as u64]),
                )?,
                (CageKind::Cage, RegionIntegration::Resample { n_w }) => context.cage_resampled(
                    &cand.partition,
                    oc,
                    fine,
                    n_w,
                    rng::derive_seed(seed, &[0x6576, cand.k as u64, cand.m as u64]),
                )?,
                (_, RegionIntegration::VarianceForm) => {
                    context.dcage_variance_form(&cand.partition)?
                }
            };
            Ok(report.average)
        })
        .collect::<Result<_>>()?;
    let mut best = 0usize;
    for i in 1..candidates.len() {
        let better = scores[i] < scores[best]
            || (scores[i] == scores[best]
                && (candidates[i].k, candidates[i].m) < (candidates[best].k, candidates[best].m));
        if better {
            best = i;
        }
    }
    let all: Vec<CandidateScore> = candidates
        .iter()
        .zip(&scores)
        .map(|(c, &avg_criterion)| CandidateScore { k: c.k, m: c.m, avg_criterion })
        .collect();
    let optimal = candidates.into_iter().nth(best).unwrap();
    Ok(SearchResult { optimal, optimal_avg: scores[best], all })
}

/// Runs stage one and stage two together.
pub fn search(
    draws: &PosteriorDraws,
    oc: &OcBasis,
    fine: &FineSupport,
    config: &SearchConfig,
) -> Result<SearchResult> {
    let cands = candidates(draws, fine, config)?;
    select_optimal_with(
        cands,
        draws,
        oc,
        fine,
        config.criterion,
        config.region_integration,
        config.seed,
    )
}

/// Simplified prescan: the full search with M = 1 (the first retained draw)
/// over a wide k range; returns a window of half-width 10 centered at the
/// found optimum, clipped to `[2, n_B - 1]`.
pub fn simplified_prescan(
    draws: &PosteriorDraws,
    oc: &OcBasis,
    fine: &FineSupport,
    config_wide: &SearchConfig,
) -> Result<(usize, usize)> {
    let single = draws.first_draw()?;
    let result = search(&single, oc, fine, config_wide)?;
    let n_op = result.optimal.k;
    let lo = n_op.saturating_sub(10).max(2);
    let hi = (n_op + 10).min(fine.n_units() - 1);
    Ok((lo, hi))
}

/// Relative mean squared prediction error and relative aggregation error of
/// `support_a` against `support_b` (a in the numerator: values above 1 favor
/// b). `truth` and `estimate` are per-fine-unit values; region values are
/// their area-weighted member means.
pub fn re_mspe_re_cage(
    fine: &FineSupport,
    truth: &[f64],
    estimate: &[f64],
    support_a: &Partition,
    support_b: &Partition,
) -> Result<(f64, f64)> {
    let n_b = fine.n_units();
    if truth.len() != n_b || estimate.len() != n_b {
        return Err(CageError::InvalidInput("truth/estimate must cover the fine support".into()));
    }
    if support_a.len() != n_b || support_b.len() != n_b {
        return Err(CageError::InvalidInput("partitions must cover the fine support".into()));
    }
    let areas = fine.areas();
    let mspe_term = |p: &Partition| -> f64 {
        p.members()
            .iter()
            .map(|mem| {
                let area: f64 = mem.iter().map(|&h| areas[h]).sum();
                let t: f64 = mem.iter().map(|&h| areas[h] * truth[h]).sum::<f64>() / area;
                let e: f64 = mem.iter().map(|&h| areas[h] * estimate[h]).sum::<f64>() / area;
                (t - e) * (t - e) / area
            })
            .sum()
    };
    let cage_term = |p: &Partition| -> f64 {
        p.members()
            .iter()
            .map(|mem| {
                let area: f64 = mem.iter().map(|&h| areas[h]).sum();
                let t: f64 = mem.iter().map(|&h| areas[h] * truth[h]).sum::<f64>() / area;
                mem.iter().map(|&h| (truth[h] - t) * (truth[h] - t) / area).sum::<f64>()
            })
            .sum()
    };
    let (mspe_a, mspe_b) = (mspe_term(support_a), mspe_term(support_b));
    let (cage_a, cage_b) = (cage_term(support_a), cage_term(support_b));
    if mspe_b == 0.0 || cage_b == 0.0 {
        return Err(CageError::DegenerateComparison(
            "reference support has zero error; the ratio is undefined".into(),
        ));
    }
    Ok((mspe_a / mspe_b, cage_a / cage_b))
}

/// Flags whether every region of the partition is contiguous (SHC output
/// always is; k-means output need not be).
pub fn contiguity_report(fine: &FineSupport, partition: &Partition) -> Vec<bool> {
    contiguity_check(fine, partition)
}
