//! Synthetic multiscale data and the desk-scale experiments built on it.
//!
//! The generator draws a latent field `Y_s(s) = ψ*(s)ᵀα + δ(s; ξ)` from a
//! 100-knot orthonormalized bisquare basis over the unit square, evaluates it
//! on a point grid, aggregates it onto a coarser cell grid by averaging the
//! member points, and emits noisy observations at both supports: points are
//! masked to a coverage fraction, areal data cover every cell. The true
//! coefficient variances decay as `λ_j ∝ 1/j`, rescaled so the process
//! variance matches the configured signal level against the noise variance.

use crate::basis::{GbfFamily, GbfKind, KnotSet, OcBasis};
use crate::cage::CageKind;
use crate::error::{CageError, Result};
use crate::geometry::{build_grid, FineSupport, Rect};
use crate::inference::{
    gibbs_run, GibbsConfig, GibbsControls, ModelSpec, Observation, ObsSupport, PosteriorDraws,
    QPrior,
};
use crate::regionalize::{search, RegionIntegration, SearchConfig, SearchResult};
use crate::rng;
use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Generator settings. Defaults mirror the reference experiment: a 20x20
/// point grid and a 10x10 cell grid on the unit square, rank-100 truth,
/// noise variance 0.1820 against process variance 0.91 (signal-to-noise 5),
/// and 50% point coverage.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub point_nx: usize,
    pub point_ny: usize,
    pub areal_nx: usize,
    pub areal_ny: usize,
    pub bbox: Rect,
    pub r_true: usize,
    pub noise_var: f64,
    pub point_coverage: f64,
    pub sigma_xi_sq: f64,
    pub process_var: f64,
    pub samples_per_cell: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            point_nx: 20,
            point_ny: 20,
            areal_nx: 10,
            areal_ny: 10,
            bbox: Rect::unit_square(),
            r_true: 100,
            noise_var: 0.1820,
            point_coverage: 0.5,
            sigma_xi_sq: 0.01,
            process_var: 0.91,
            samples_per_cell: 100,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.point_nx == 0 || self.point_ny == 0 || self.areal_nx == 0 || self.areal_ny == 0 {
            return Err(CageError::Configuration("grid dimensions must be >= 1".into()));
        }
        if !(self.point_coverage > 0.0 && self.point_coverage <= 1.0) {
            return Err(CageError::Configuration("point coverage must lie in (0, 1]".into()));
        }
        if !(self.noise_var >= 0.0) || !(self.sigma_xi_sq >= 0.0) || !(self.process_var > 0.0) {
            return Err(CageError::Configuration("variances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Truth plus observations from one synthetic replicate.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub fine: FineSupport,
    /// Point-grid sites of the latent point support.
    pub points: Vec<Vec<f64>>,
    /// Cell index of each point site.
    pub point_cell: Vec<usize>,
    /// Latent field at the point sites.
    pub y_s: Vec<f64>,
    /// Latent field on the cells: the mean of `y_s` over each cell's member
    /// points (exact by construction).
    pub y_a: Vec<f64>,
    /// Which point sites carry an observation.
    pub observed: Vec<bool>,
    pub obs: Vec<Observation>,
    /// True coefficient variances used for α.
    pub lambda_true: Vec<f64>,
}

/// Equally spaced lattice of `m x m` knots over the box when `n = m²`;
/// otherwise a greedy max-min selection from a dense lattice.
pub fn lattice_knots(n: usize, bbox: &Rect, seed: u64) -> Result<KnotSet> {
    let m = (n as f64).sqrt().round() as usize;
    if m * m == n {
        let mut knots = Vec::with_capacity(n);
        for iy in 0..m {
            for ix in 0..m {
                knots.push(vec![
                    bbox.min[0] + (ix as f64 + 0.5) / m as f64 * (bbox.max[0] - bbox.min[0]),
                    bbox.min[1] + (iy as f64 + 0.5) / m as f64 * (bbox.max[1] - bbox.min[1]),
                ]);
            }
        }
        KnotSet::with_bandwidth_rule(knots)
    } else {
        let side = ((n as f64).sqrt().ceil() as usize + 2).max(4);
        let mut cands = Vec::with_capacity(side * side);
        for iy in 0..side {
            for ix in 0..side {
                cands.push(vec![
                    bbox.min[0] + (ix as f64 + 0.5) / side as f64 * (bbox.max[0] - bbox.min[0]),
                    bbox.min[1] + (iy as f64 + 0.5) / side as f64 * (bbox.max[1] - bbox.min[1]),
                ]);
            }
        }
        crate::basis::place_knots(&cands, n, seed)
    }
}

/// Orthonormalized bisquare basis with `r` lattice knots over the box, Gram
/// matrix from seeded Monte Carlo with `n_w` uniform points.
pub fn lattice_oc_basis(r: usize, bbox: &Rect, n_w: usize, seed: u64) -> Result<OcBasis> {
    let knots = lattice_knots(r, bbox, seed)?;
    let family = GbfFamily::new(GbfKind::Bisquare, knots);
    let cloud = crate::geometry::sample_region(
        &crate::geometry::RegionSpec::Rect(bbox),
        n_w,
        rng::derive_seed(seed, &[0x6772]),
    )?;
    let gram = crate::basis::gram_matrix(&family, &cloud, bbox.volume())?;
    OcBasis::from_gram(family, gram)
}

/// Coefficient variances `λ_j ∝ 1/j` rescaled to sum to the process variance.
pub fn decaying_spectrum(r: usize, total: f64) -> Vec<f64> {
    let harmonic: f64 = (1..=r).map(|j| 1.0 / j as f64).sum();
    (1..=r).map(|j| total / (j as f64 * harmonic)).collect()
}

/// Draws one synthetic replicate.
pub fn simulate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let fine = build_grid(
        spec.areal_nx,
        spec.areal_ny,
        &spec.bbox,
        spec.samples_per_cell,
        rng::derive_seed(spec.seed, &[0x67656f]),
    )?;

    // truth basis: orthonormalized over the same domain
    let oc = lattice_oc_basis(
        spec.r_true,
        &spec.bbox,
        20_000,
        rng::derive_seed(spec.seed, &[0x746f]),
    )?;

    // point sites: an evenly spaced grid whose upper-right corner touches the
    // domain boundary
    let mut points = Vec::with_capacity(spec.point_nx * spec.point_ny);
    let wx = spec.bbox.max[0] - spec.bbox.min[0];
    let wy = spec.bbox.max[1] - spec.bbox.min[1];
    for iy in 0..spec.point_ny {
        for ix in 0..spec.point_nx {
            points.push(vec![
                spec.bbox.min[0] + (ix as f64 + 1.0) / spec.point_nx as f64 * wx,
                spec.bbox.min[1] + (iy as f64 + 1.0) / spec.point_ny as f64 * wy,
            ]);
        }
    }
    let point_cell: Vec<usize> = points
        .iter()
        .map(|p| {
            fine.locate_point(p).ok_or_else(|| {
                CageError::InvalidGeometry("point site fell outside the cell grid".into())
            })
        })
        .collect::<Result<_>>()?;

    // latent field
    let lambda_true = decaying_spectrum(spec.r_true, spec.process_var);
    let mut rng = rng::stream(spec.seed, &[0x73696d]);
    let alpha = DVector::from_fn(spec.r_true, |j, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * lambda_true[j].sqrt()
    });
    let n_b = fine.n_units();
    let xi: Vec<f64> = (0..n_b)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * spec.sigma_xi_sq.sqrt()
        })
        .collect();
    let y_s: Vec<f64> = points
        .iter()
        .zip(&point_cell)
        .map(|(p, &cell)| oc.eval_point(p).dot(&alpha) + xi[cell])
        .collect();

    // aggregate truth: mean of member-point values per cell
    let mut y_a = vec![0.0; n_b];
    let mut counts = vec![0usize; n_b];
    for (v, &cell) in y_s.iter().zip(&point_cell) {
        y_a[cell] += v;
        counts[cell] += 1;
    }
    for (v, &c) in y_a.iter_mut().zip(&counts) {
        if c == 0 {
            return Err(CageError::InvalidGeometry(
                "a cell contains no point sites; refine the point grid".into(),
            ));
        }
        *v /= c as f64;
    }

    // observations: masked noisy points plus complete noisy areal data
    let n_pts = points.len();
    let n_keep = ((n_pts as f64) * spec.point_coverage).round() as usize;
    let mut order: Vec<usize> = (0..n_pts).collect();
    for i in (1..n_pts).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let mut observed = vec![false; n_pts];
    for &i in order.iter().take(n_keep) {
        observed[i] = true;
    }
    let noise_sd = spec.noise_var.sqrt();
    let mut obs = Vec::with_capacity(n_keep + n_b);
    for (i, p) in points.iter().enumerate() {
        if observed[i] {
            let eps: f64 = StandardNormal.sample(&mut rng);
            obs.push(Observation {
                support: ObsSupport::Point(p.clone()),
                z: y_s[i] + noise_sd * eps,
                var_z: spec.noise_var.max(1e-12),
            });
        }
    }
    for (j, y) in y_a.iter().enumerate() {
        let eps: f64 = StandardNormal.sample(&mut rng);
        obs.push(Observation {
            support: ObsSupport::Units(vec![j]),
            z: y + noise_sd * eps,
            var_z: spec.noise_var.max(1e-12),
        });
    }

    Ok(SynthData { fine, points, point_cell, y_s, y_a, observed, obs, lambda_true })
}

/// Pipeline settings for the fit-and-regionalize experiments.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mcmc: GibbsConfig,
    pub g_l: usize,
    pub g_u: usize,
    pub search_seed: u64,
    /// Monte Carlo cloud for the fitted basis Gram matrix.
    pub gram_n_w: usize,
    /// Stage-two evaluation route. The variance decomposition is the default
    /// for experiments: under Lebesgue areas it keeps a per-unit floor that
    /// penalizes over-fine supports, so the chosen region count tracks the
    /// rank of the fitted basis instead of collapsing to `g_U`.
    pub region_integration: RegionIntegration,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mcmc: GibbsConfig::new(2000, 500, 30, 1),
            g_l: 2,
            g_u: 99,
            search_seed: 1,
            gram_n_w: 20_000,
            region_integration: RegionIntegration::VarianceForm,
        }
    }
}

/// Fits the hierarchical model to one synthetic replicate with a rank-`r_fit`
/// basis and returns the basis and retained draws.
pub fn fit_synth(
    data: &SynthData,
    r_fit: usize,
    cfg: &ExperimentConfig,
) -> Result<(OcBasis, PosteriorDraws)> {
    let oc = lattice_oc_basis(
        r_fit,
        &data.fine.bbox,
        cfg.gram_n_w,
        rng::derive_seed(cfg.mcmc.seed, &[0x666974, r_fit as u64]),
    )?;
    let spec = ModelSpec::new(
        &oc,
        &data.fine,
        data.obs.clone(),
        QPrior::inverse_wishart_default(r_fit),
    );
    let draws = gibbs_run(&spec, &cfg.mcmc, &GibbsControls::free())?;
    Ok((oc, draws))
}

/// Full two-stage search on one replicate at one fitted rank.
pub fn regionalize_synth(
    data: &SynthData,
    r_fit: usize,
    cfg: &ExperimentConfig,
) -> Result<(OcBasis, PosteriorDraws, SearchResult)> {
    let (oc, draws) = fit_synth(data, r_fit, cfg)?;
    let mut search_cfg = SearchConfig::new(cfg.g_l, cfg.g_u, cfg.search_seed);
    search_cfg.criterion = CageKind::Dcage;
    search_cfg.region_integration = cfg.region_integration;
    let result = search(&draws, &oc, &data.fine, &search_cfg)?;
    Ok((oc, draws, result))
}

/// One row of the rank experiment table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankRow {
    pub r: usize,
    pub replicate: usize,
    pub n_c_op: usize,
}

/// Runs the full pipeline per `(r, replicate)` cell and tabulates the chosen
/// region count. Replicates run as independent tasks with derived seeds.
pub fn rank_experiment(
    spec: &SynthSpec,
    r_values: &[usize],
    replicates: usize,
    cfg: &ExperimentConfig,
) -> Result<Vec<RankRow>> {
    if replicates == 0 {
        return Err(CageError::Configuration("replicates must be >= 1".into()));
    }
    let cells: Vec<(usize, usize)> = (0..replicates)
        .flat_map(|rep| r_values.iter().map(move |&r| (r, rep)))
        .collect();
    cells
        .into_par_iter()
        .map(|(r, rep)| {
            let mut rep_spec = spec.clone();
            rep_spec.seed = rng::derive_seed(spec.seed, &[0x726570, rep as u64]);
            let data = simulate(&rep_spec)?;
            let mut rep_cfg = cfg.clone();
            rep_cfg.mcmc.seed = rng::derive_seed(cfg.mcmc.seed, &[rep as u64, r as u64]);
            rep_cfg.search_seed = rng::derive_seed(cfg.search_seed, &[rep as u64, r as u64]);
            let (_, _, result) = regionalize_synth(&data, r, &rep_cfg)?;
            Ok(RankRow { r, replicate: rep, n_c_op: result.optimal.k })
        })
        .collect()
}

/// Rank scan over one replicate: the `(r, n_C^op)` curve used to choose the
/// basis rank.
pub fn rank_scan(
    data: &SynthData,
    r_values: &[usize],
    cfg: &ExperimentConfig,
) -> Result<Vec<(usize, usize)>> {
    r_values
        .par_iter()
        .map(|&r| {
            let mut rep_cfg = cfg.clone();
            rep_cfg.mcmc.seed = rng::derive_seed(cfg.mcmc.seed, &[0x7363616e, r as u64]);
            let (_, _, result) = regionalize_synth(data, r, &rep_cfg)?;
            Ok((r, result.optimal.k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_shapes_and_consistency() {
        let spec = SynthSpec { samples_per_cell: 16, ..Default::default() };
        let data = simulate(&spec).unwrap();
        assert_eq!(data.points.len(), 400);
        assert_eq!(data.fine.n_units(), 100);
        assert_eq!(data.y_a.len(), 100);
        // 50% coverage -> 200 point observations + 100 areal
        assert_eq!(data.obs.len(), 300);
        // every cell holds exactly 4 point sites
        let mut counts = vec![0usize; 100];
        for &c in &data.point_cell {
            counts[c] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
        // aggregation consistency: y_a is the mean of member-point values
        for (j, &ya) in data.y_a.iter().enumerate() {
            let members: Vec<f64> = data
                .y_s
                .iter()
                .zip(&data.point_cell)
                .filter(|(_, &c)| c == j)
                .map(|(v, _)| *v)
                .collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            approx::assert_abs_diff_eq!(ya, mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_noise_observations_equal_truth() {
        let spec = SynthSpec {
            noise_var: 0.0,
            samples_per_cell: 16,
            seed: 3,
            ..Default::default()
        };
        let data = simulate(&spec).unwrap();
        let mut checked = 0;
        let mut obs_iter = data.obs.iter();
        for (i, seen) in data.observed.iter().enumerate() {
            if *seen {
                let o = obs_iter.next().unwrap();
                approx::assert_abs_diff_eq!(o.z, data.y_s[i], epsilon = 1e-12);
                checked += 1;
            }
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn signal_to_noise_ratio_is_near_five() {
        // empirical process variance over many replicates against the noise
        // variance; the spectrum is scaled so the ratio is (0.91+0.01)/0.182
        let mut total_var = 0.0;
        let mut n = 0usize;
        for seed in 0..25u64 {
            let spec = SynthSpec { seed, samples_per_cell: 4, ..Default::default() };
            let data = simulate(&spec).unwrap();
            let mean = data.y_s.iter().sum::<f64>() / data.y_s.len() as f64;
            total_var += data.y_s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            n += data.y_s.len() - 1;
        }
        let var = total_var / n as f64;
        let ratio = var / 0.1820;
        assert!((ratio - 5.0).abs() / 5.0 <= 0.10, "signal-to-noise ratio {ratio}");
    }

    #[test]
    fn simulate_is_deterministic() {
        let spec = SynthSpec { samples_per_cell: 9, seed: 11, ..Default::default() };
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a.y_s, b.y_s);
        assert_eq!(a.y_a, b.y_a);
        assert_eq!(a.observed, b.observed);
    }

    #[test]
    fn lattice_knots_square_and_maxmin() {
        let bbox = Rect::unit_square();
        let ks = lattice_knots(9, &bbox, 1).unwrap();
        assert_eq!(ks.knots.len(), 9);
        approx::assert_abs_diff_eq!(ks.bandwidth, 0.5, epsilon = 1e-12);
        let ks2 = lattice_knots(7, &bbox, 1).unwrap();
        assert_eq!(ks2.knots.len(), 7);
    }

    #[test]
    fn decaying_spectrum_sums_to_total() {
        let lambda = decaying_spectrum(100, 0.91);
        let total: f64 = lambda.iter().sum();
        approx::assert_abs_diff_eq!(total, 0.91, epsilon = 1e-12);
        assert!(lambda.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn tiny_rank_experiment_runs() {
        let spec = SynthSpec {
            point_nx: 8,
            point_ny: 8,
            areal_nx: 4,
            areal_ny: 4,
            r_true: 16,
            samples_per_cell: 16,
            seed: 5,
            ..Default::default()
        };
        let cfg = ExperimentConfig {
            mcmc: GibbsConfig::new(60, 20, 4, 3),
            g_l: 2,
            g_u: 15,
            search_seed: 9,
            gram_n_w: 4000,
        };
        let rows = rank_experiment(&spec, &[4, 9], 1, &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.n_c_op >= 2 && row.n_c_op <= 15);
        }
    }
}
