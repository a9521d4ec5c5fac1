//! Hierarchical model and Gibbs sampler.
//!
//! The data model is `Z(u) | · ~ Normal(μ + ψ*(u)ᵀη + δ(u; ξ), σ_Z²(u))` with
//! `η | Q ~ N(0, Q)`, `ξ | σ_ξ² ~ N(0, σ_ξ² I)`, `μ ~ N(0, σ_μ²)`,
//! `σ_ξ² ~ IG(α_ξ, β_ξ)`, and a prior on the r x r covariance Q. The
//! fine-scale term δ is constant within each fine areal unit.
//!
//! The sampler is a systematic-scan Gibbs with the standard conjugate full
//! conditionals:
//!
//! - `η | ·` is normal with precision `Q⁻¹ + Ψ_obsᵀ D_Z⁻¹ Ψ_obs`;
//! - `ξ | ·` is normal with precision `σ_ξ⁻² I + H_obsᵀ D_Z⁻¹ H_obs`;
//! - `μ | ·` is normal with precision `σ_μ⁻² + Σ 1/σ_Z²`;
//! - `σ_ξ² | ·` is inverse gamma `(α_ξ + n_B/2, β_ξ + ‖ξ‖²/2)`;
//! - `Q | ·` is inverse Wishart `(df + 1, scale + ηηᵀ)` under the inverse
//!   Wishart prior, or rebuilt deterministically from the Moran's-I target
//!   with `σ² | · ~ IG(shape + r/2, rate + ηᵀP₀η/2)` under the MI prior.
//!
//! Retained draws carry the latent fine-support field
//! `Y_B = Ψ_B η + ξ` assembled exactly from the sampled blocks; the trend μ
//! is exposed separately and added only for prediction maps.

use crate::basis::OcBasis;
use crate::error::{CageError, Result};
use crate::geometry::FineSupport;
use crate::rng;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// Where a datum lives: a point in the domain, or a union of fine units.
#[derive(Debug, Clone)]
pub enum ObsSupport {
    Point(Vec<f64>),
    Units(Vec<usize>),
}

/// One datum with known measurement variance.
#[derive(Debug, Clone)]
pub struct Observation {
    pub support: ObsSupport,
    pub z: f64,
    pub var_z: f64,
}

/// Prior on the random-effects covariance Q.
#[derive(Debug, Clone)]
pub enum QPrior {
    InverseWishart { df: f64, scale: DMatrix<f64> },
    /// Moran's-I style prior: Q is a deterministic function of one scalar σ²
    /// whose target is built from the fine-support adjacency.
    MoranI { shape: f64, rate: f64 },
    /// Accepted in configuration, rejected at run time.
    GivensAngle,
}

impl QPrior {
    /// Default inverse Wishart: df = r + 2, identity scale.
    pub fn inverse_wishart_default(r: usize) -> Self {
        QPrior::InverseWishart { df: r as f64 + 2.0, scale: DMatrix::identity(r, r) }
    }
}

/// Model inputs: basis, fine support, observations, priors.
pub struct ModelSpec<'a> {
    pub oc: &'a OcBasis,
    pub fine: &'a FineSupport,
    pub obs: Vec<Observation>,
    pub q_prior: QPrior,
    pub sigma_mu_sq: f64,
    pub alpha_xi: f64,
    pub beta_xi: f64,
}

impl<'a> ModelSpec<'a> {
    /// Vague defaults: σ_μ² = 1e6, α_ξ = β_ξ = 1.
    pub fn new(oc: &'a OcBasis, fine: &'a FineSupport, obs: Vec<Observation>, q_prior: QPrior) -> Self {
        ModelSpec { oc, fine, obs, q_prior, sigma_mu_sq: 1e6, alpha_xi: 1.0, beta_xi: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.oc.rank();
        if !(self.sigma_mu_sq > 0.0) || !(self.alpha_xi > 0.0) || !(self.beta_xi > 0.0) {
            return Err(CageError::Configuration("hyperparameters must be positive".into()));
        }
        match &self.q_prior {
            QPrior::InverseWishart { df, scale } => {
                if *df <= r as f64 - 1.0 {
                    return Err(CageError::Configuration(format!(
                        "inverse Wishart df must exceed r - 1 = {}",
                        r - 1
                    )));
                }
                if scale.nrows() != r || scale.ncols() != r {
                    return Err(CageError::Configuration("inverse Wishart scale must be r x r".into()));
                }
            }
            QPrior::MoranI { shape, rate } => {
                if !(*shape > 0.0) || !(*rate > 0.0) {
                    return Err(CageError::Configuration("MI prior hyperparameters must be positive".into()));
                }
            }
            QPrior::GivensAngle => {}
        }
        for (i, o) in self.obs.iter().enumerate() {
            if !(o.var_z > 0.0) || !o.z.is_finite() {
                return Err(CageError::InvalidInput(format!("observation {i} has invalid z or var_z")));
            }
        }
        Ok(())
    }
}

/// Design matrices relating observations and fine units to the basis.
pub struct Design {
    /// n x r, row u is ψ*(u).
    pub psi_obs: DMatrix<f64>,
    /// n x n_B incidence of the fine-scale term: indicator row for a point
    /// in unit j, area-fraction weights for an areal observation.
    pub h_obs: DMatrix<f64>,
    /// n_B x r, row j is ψ*(B_j).
    pub psi_b: DMatrix<f64>,
}

/// Builds Ψ_obs, H_obs, and Ψ_B for a model spec.
pub fn build_design(spec: &ModelSpec<'_>) -> Result<Design> {
    let r = spec.oc.rank();
    let n = spec.obs.len();
    let n_b = spec.fine.n_units();
    let psi_b = spec.oc.eval_units(spec.fine)?;
    let mut psi_obs = DMatrix::zeros(n, r);
    let mut h_obs = DMatrix::zeros(n, n_b);
    for (row, obs) in spec.obs.iter().enumerate() {
        match &obs.support {
            ObsSupport::Point(p) => {
                let j = spec.fine.locate_point(p).ok_or_else(|| {
                    CageError::SupportMismatch(format!(
                        "point observation {row} lies outside every fine unit"
                    ))
                })?;
                let v = spec.oc.eval_point(p);
                for c in 0..r {
                    psi_obs[(row, c)] = v[c];
                }
                h_obs[(row, j)] = 1.0;
            }
            ObsSupport::Units(ids) => {
                if ids.is_empty() {
                    return Err(CageError::InvalidInput(format!("areal observation {row} has no members")));
                }
                let mut area = 0.0;
                for &id in ids {
                    if id >= n_b {
                        return Err(CageError::SupportMismatch(format!(
                            "areal observation {row} references unit {id} outside the support"
                        )));
                    }
                    area += spec.fine.units[id].area;
                }
                // psi*(u) for a union is the area-weighted mean of member rows,
                // and the fine-scale term aggregates with the same weights
                for &id in ids {
                    let wgt = spec.fine.units[id].area / area;
                    h_obs[(row, id)] = wgt;
                    for c in 0..r {
                        psi_obs[(row, c)] += wgt * psi_b[(id, c)];
                    }
                }
            }
        }
    }
    Ok(Design { psi_obs, h_obs, psi_b })
}

/// Best positive approximant: symmetrize, then floor the spectrum at
/// `EPS_PD` relative to the largest eigenvalue magnitude. The floor (rather
/// than a hard zero) keeps the result invertible; a smooth low-rank basis can
/// make the projected Moran operator entirely negative, in which case the
/// approximant collapses to the floor everywhere.
pub fn positive_approximant(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let (p, mut lambda) = crate::basis::sym_eigen_sorted(&sym);
    let lambda_abs_max = lambda.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !(lambda_abs_max > 0.0) {
        return Err(CageError::DegenerateBasis(
            "positive approximant of a zero matrix".into(),
        ));
    }
    let floor = crate::basis::EPS_PD * lambda_abs_max;
    for v in lambda.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    Ok(&p * DMatrix::from_diagonal(&lambda) * p.transpose())
}

/// Precision structure of the Moran's-I prior with σ² left symbolic:
/// `prec(η) = P₀ / σ²` where `P₀ = R_Bᵀ A⁺{Q_Bᵀ(I - A)Q_B} R_B` from the thin
/// QR decomposition `Ψ_B = Q_B R_B` and the support adjacency A. With no
/// neighbors the target reduces to `R_BᵀR_B / σ²`.
pub struct MiTarget {
    pub precision: DMatrix<f64>,
}

pub fn mi_target(spec: &ModelSpec<'_>) -> Result<MiTarget> {
    let design = build_design(spec)?;
    mi_target_from(&design.psi_b, &spec.fine.adjacency.to_dense())
}

pub fn mi_target_from(psi_b: &DMatrix<f64>, adjacency: &DMatrix<f64>) -> Result<MiTarget> {
    let r = psi_b.ncols();
    let n_b = psi_b.nrows();
    if n_b < r {
        return Err(CageError::DegenerateBasis(format!(
            "MI target needs n_B >= r, got n_B = {n_b}, r = {r}"
        )));
    }
    let qr = psi_b.clone().qr();
    let q_b = qr.q();
    let r_b = qr.r();
    let diag_max = (0..r).map(|i| r_b[(i, i)].abs()).fold(0.0f64, f64::max);
    for i in 0..r {
        if r_b[(i, i)].abs() <= 1e-12 * diag_max {
            return Err(CageError::DegenerateBasis(
                "Ψ_B is rank deficient; the MI prior target is undefined".into(),
            ));
        }
    }
    let inner = q_b.tr_mul(&(DMatrix::identity(n_b, n_b) - adjacency)) * &q_b;
    let plus = positive_approximant(&inner)?;
    let precision = r_b.tr_mul(&plus) * &r_b;
    // enforce exact symmetry for downstream Cholesky factorizations
    let precision = (&precision + precision.transpose()) * 0.5;
    Ok(MiTarget { precision })
}

/// Iteration controls for one chain.
#[derive(Debug, Clone)]
pub struct GibbsConfig {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl GibbsConfig {
    pub fn new(iters: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        GibbsConfig { iters, burn_in, thin, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.iters <= self.burn_in {
            return Err(CageError::Configuration("iters must exceed burn_in".into()));
        }
        if self.thin == 0 {
            return Err(CageError::Configuration("thin must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixture knobs: pin μ or Q to known values, or switch the fine-scale term
/// off entirely (ξ ≡ 0). Defaults leave everything free.
#[derive(Debug, Clone)]
pub struct GibbsControls {
    pub fixed_mu: Option<f64>,
    pub fixed_q: Option<DMatrix<f64>>,
    pub sample_xi: bool,
}

impl Default for GibbsControls {
    fn default() -> Self {
        GibbsControls { fixed_mu: None, fixed_q: None, sample_xi: true }
    }
}

impl GibbsControls {
    pub fn free() -> Self {
        Self::default()
    }
}

/// Retained MCMC output. `y_b[m] = Ψ_B η[m] + ξ[m]` holds exactly for every
/// draw; μ is kept separately and enters only prediction summaries.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub m: usize,
    pub mu: Vec<f64>,
    pub eta: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    pub sigma_xi_sq: Vec<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub y_b: Vec<DVector<f64>>,
}

impl PosteriorDraws {
    pub fn rank(&self) -> usize {
        self.q.first().map(|q| q.nrows()).unwrap_or(0)
    }

    pub fn n_units(&self) -> usize {
        self.y_b.first().map(|y| y.len()).unwrap_or(0)
    }

    /// Mean of the Q draws, in draw order. By bilinearity, quadratic forms in
    /// this matrix equal the draw-averaged quadratic forms.
    pub fn q_mean(&self) -> DMatrix<f64> {
        let r = self.rank();
        let mut acc = DMatrix::zeros(r, r);
        for q in &self.q {
            acc += q;
        }
        acc / self.m as f64
    }

    /// A single-draw view (the first retained draw), for prescan runs.
    pub fn first_draw(&self) -> Result<PosteriorDraws> {
        if self.m == 0 {
            return Err(CageError::InsufficientDraws("no retained draws".into()));
        }
        Ok(PosteriorDraws {
            m: 1,
            mu: vec![self.mu[0]],
            eta: vec![self.eta[0].clone()],
            xi: vec![self.xi[0].clone()],
            sigma_xi_sq: vec![self.sigma_xi_sq[0]],
            q: vec![self.q[0].clone()],
            y_b: vec![self.y_b[0].clone()],
        })
    }
}

fn draw_standard_normal<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn draw_inverse_gamma<R: Rng>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| CageError::NumericalFailure(format!("inverse gamma parameters: {e}")))?;
    let x: f64 = g.sample(rng);
    if !(x > 0.0) {
        return Err(CageError::NumericalFailure("inverse gamma draw collapsed to zero".into()));
    }
    Ok(1.0 / x)
}

/// Draws Q ~ InverseWishart(df, scale) by the Bartlett construction. The
/// result is assembled as a Gram product, so it is symmetric PSD exactly.
pub fn sample_inverse_wishart<R: Rng>(rng: &mut R, df: f64, scale: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = scale.nrows();
    if df <= r as f64 - 1.0 {
        return Err(CageError::Configuration("inverse Wishart df must exceed r - 1".into()));
    }
    let chol = Cholesky::new(scale.clone()).ok_or_else(|| {
        CageError::NumericalFailure("inverse Wishart scale is not positive definite".into())
    })?;
    let l_s = chol.l();
    let mut a = DMatrix::zeros(r, r);
    for i in 0..r {
        let chi_shape = (df - i as f64) / 2.0;
        let g = Gamma::new(chi_shape, 2.0)
            .map_err(|e| CageError::NumericalFailure(format!("chi-square shape: {e}")))?;
        let chi2: f64 = g.sample(rng);
        a[(i, i)] = chi2.max(1e-300).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    // W ~ Wishart(df, scale^{-1}) is L_S^{-T} A Aᵀ L_S^{-1}; its inverse is
    // VᵀV with V = A^{-1} L_Sᵀ
    let v = a
        .solve_lower_triangular(&l_s.transpose())
        .ok_or_else(|| CageError::NumericalFailure("Bartlett factor is singular".into()))?;
    Ok(v.tr_mul(&v))
}

/// Samples from N(mean, Prec^{-1}) given the precision Cholesky factor.
fn sample_gaussian_from_precision<R: Rng>(
    chol: &Cholesky<f64, nalgebra::Dyn>,
    mean: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = draw_standard_normal(rng, mean.len());
    // solve Lᵀ x = z so that cov(x) = (L Lᵀ)^{-1}
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("Cholesky factor is invertible");
    mean + x
}

/// Runs one Gibbs chain and retains `(iters - burn_in) / thin` draws.
pub fn gibbs_run(
    spec: &ModelSpec<'_>,
    config: &GibbsConfig,
    controls: &GibbsControls,
) -> Result<PosteriorDraws> {
    spec.validate()?;
    config.validate()?;
    if matches!(spec.q_prior, QPrior::GivensAngle) {
        return Err(CageError::Unimplemented(
            "the Givens-angle prior on Q is accepted in configuration but not implemented".into(),
        ));
    }
    let design = build_design(spec)?;
    let r = spec.oc.rank();
    let n_b = spec.fine.n_units();
    let n = spec.obs.len();

    let z = DVector::from_iterator(n, spec.obs.iter().map(|o| o.z));
    let d_inv = DVector::from_iterator(n, spec.obs.iter().map(|o| 1.0 / o.var_z));

    // fixed pieces of the conditional precisions
    let mut psi_t_dinv = design.psi_obs.transpose();
    for (col, w) in d_inv.iter().enumerate() {
        psi_t_dinv.column_mut(col).scale_mut(*w);
    }
    let psi_prec = &psi_t_dinv * &design.psi_obs;
    let mut h_t_dinv = design.h_obs.transpose();
    for (col, w) in d_inv.iter().enumerate() {
        h_t_dinv.column_mut(col).scale_mut(*w);
    }
    let h_prec = &h_t_dinv * &design.h_obs;
    let total_prec_weight: f64 = d_inv.iter().sum();

    // MI prior target, computed once
    let mi = match &spec.q_prior {
        QPrior::MoranI { .. } => {
            let t = mi_target_from(&design.psi_b, &spec.fine.adjacency.to_dense())?;
            let p0_chol = Cholesky::new(t.precision.clone()).ok_or_else(|| {
                CageError::DegenerateBasis("MI precision target is not positive definite".into())
            })?;
            let p0_inv = p0_chol.inverse();
            Some((t.precision, p0_inv))
        }
        _ => None,
    };

    let mut rng = rng::stream(config.seed, &[0x6269]);
    let mut mu = controls.fixed_mu.unwrap_or(0.0);
    let mut eta: DVector<f64>;
    let mut xi = DVector::zeros(n_b);
    let mut sigma_xi_sq = 1.0;
    let mut q = match (&controls.fixed_q, &spec.q_prior) {
        (Some(fixed), _) => fixed.clone(),
        (None, QPrior::InverseWishart { df, scale }) => {
            if *df > r as f64 + 1.0 {
                scale / (df - r as f64 - 1.0)
            } else {
                DMatrix::identity(r, r)
            }
        }
        (None, QPrior::MoranI { .. }) => mi.as_ref().unwrap().1.clone(),
        (None, QPrior::GivensAngle) => unreachable!(),
    };

    let m_keep = (config.iters - config.burn_in) / config.thin;
    let mut draws = PosteriorDraws {
        m: 0,
        mu: Vec::with_capacity(m_keep),
        eta: Vec::with_capacity(m_keep),
        xi: Vec::with_capacity(m_keep),
        sigma_xi_sq: Vec::with_capacity(m_keep),
        q: Vec::with_capacity(m_keep),
        y_b: Vec::with_capacity(m_keep),
    };

    for it in 0..config.iters {
        // eta | mu, xi, Q
        let q_chol = Cholesky::new(q.clone()).ok_or_else(|| {
            CageError::NumericalFailure(format!("Q not positive definite at iteration {it}"))
        })?;
        let mut prec_eta = q_chol.inverse();
        prec_eta += &psi_prec;
        let resid = &z - DVector::from_element(n, mu) - &design.h_obs * &xi;
        let b = &psi_t_dinv * &resid;
        let prec_chol = Cholesky::new(prec_eta).ok_or_else(|| {
            CageError::NumericalFailure(format!("eta precision failed at iteration {it}"))
        })?;
        let mean_eta = prec_chol.solve(&b);
        eta = sample_gaussian_from_precision(&prec_chol, &mean_eta, &mut rng);

        // xi | mu, eta, sigma_xi^2
        if controls.sample_xi {
            let mut prec_xi = h_prec.clone();
            let inv_sx = 1.0 / sigma_xi_sq;
            for i in 0..n_b {
                prec_xi[(i, i)] += inv_sx;
            }
            let resid = &z - DVector::from_element(n, mu) - &design.psi_obs * &eta;
            let b = &h_t_dinv * &resid;
            let prec_chol = Cholesky::new(prec_xi).ok_or_else(|| {
                CageError::NumericalFailure(format!("xi precision failed at iteration {it}"))
            })?;
            let mean_xi = prec_chol.solve(&b);
            xi = sample_gaussian_from_precision(&prec_chol, &mean_xi, &mut rng);

            // sigma_xi^2 | xi
            sigma_xi_sq = draw_inverse_gamma(
                &mut rng,
                spec.alpha_xi + n_b as f64 / 2.0,
                spec.beta_xi + xi.norm_squared() / 2.0,
            )?;
        }

        // mu | eta, xi
        if controls.fixed_mu.is_none() {
            let prec_mu = 1.0 / spec.sigma_mu_sq + total_prec_weight;
            let resid = &z - &design.psi_obs * &eta - &design.h_obs * &xi;
            let b: f64 = resid.iter().zip(d_inv.iter()).map(|(r, w)| r * w).sum();
            let mean = b / prec_mu;
            let sd = (1.0 / prec_mu).sqrt();
            let draw: f64 = StandardNormal.sample(&mut rng);
            mu = mean + sd * draw;
        }

        // Q | eta
        if controls.fixed_q.is_none() {
            match &spec.q_prior {
                QPrior::InverseWishart { df, scale } => {
                    let s_post = scale + &eta * eta.transpose();
                    q = sample_inverse_wishart(&mut rng, df + 1.0, &s_post)?;
                }
                QPrior::MoranI { shape, rate } => {
                    let (p0, p0_inv) = mi.as_ref().unwrap();
                    let quad = (p0 * &eta).dot(&eta);
                    let sigma_sq = draw_inverse_gamma(&mut rng, shape + r as f64 / 2.0, rate + quad / 2.0)?;
                    q = p0_inv * sigma_sq;
                }
                QPrior::GivensAngle => unreachable!(),
            }
        }

        if !eta.iter().all(|v| v.is_finite())
            || !xi.iter().all(|v| v.is_finite())
            || !mu.is_finite()
            || !sigma_xi_sq.is_finite()
        {
            return Err(CageError::NumericalFailure(format!(
                "non-finite state at iteration {it}"
            )));
        }

        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 && draws.m < m_keep {
            let y_b = &design.psi_b * &eta + &xi;
            draws.mu.push(mu);
            draws.eta.push(eta.clone());
            draws.xi.push(xi.clone());
            draws.sigma_xi_sq.push(sigma_xi_sq);
            draws.q.push(q.clone());
            draws.y_b.push(y_b);
            draws.m += 1;
        }
    }
    Ok(draws)
}

/// Elementwise posterior mean and standard deviation of `Y_B` (two-pass).
pub fn posterior_summary(draws: &PosteriorDraws) -> Result<(DVector<f64>, DVector<f64>)> {
    summarize(&draws.y_b, draws.m, None)
}

/// Mean and standard deviation of the predictions `μ + Y_B`.
pub fn prediction_summary(draws: &PosteriorDraws) -> Result<(DVector<f64>, DVector<f64>)> {
    summarize(&draws.y_b, draws.m, Some(&draws.mu))
}

fn summarize(
    fields: &[DVector<f64>],
    m: usize,
    shift: Option<&[f64]>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if m < 2 {
        return Err(CageError::InsufficientDraws(format!(
            "summaries need at least 2 draws, have {m}"
        )));
    }
    let n = fields[0].len();
    let mut mean = DVector::zeros(n);
    for (i, f) in fields.iter().enumerate() {
        mean += f;
        if let Some(mu) = shift {
            mean.add_scalar_mut(mu[i]);
        }
    }
    mean /= m as f64;
    let mut var = DVector::zeros(n);
    for (i, f) in fields.iter().enumerate() {
        let offset = shift.map(|mu| mu[i]).unwrap_or(0.0);
        for j in 0..n {
            let d = f[j] + offset - mean[j];
            var[j] += d * d;
        }
    }
    var /= (m - 1) as f64;
    Ok((mean, var.map(f64::sqrt)))
}
