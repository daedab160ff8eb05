//! Coordinate-ascent variational inference for the trait/bias model.
//!
//! Likelihood and priors are Gaussian, so every mean-field factor has a
//! closed-form conditional-optimal update and the ELBO is monotone across
//! sweeps. Updates run in a fixed order for determinism.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ObservationMatrix;
use crate::error::{Error, Result};
use crate::model::{
    quadratic_form, trace_product, BiasFactor, Hyperparams, StateJson, TraitFactor,
    VariationalState,
};

/// Convergence controls for [`fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_sweeps: usize,
    pub elbo_rel_tol: f64,
    pub seed: u64,
    /// Std of the Gaussian jitter added to trait means at init.
    pub jitter_std: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 200,
            elbo_rel_tol: 1e-6,
            seed: 0,
            jitter_std: 0.01,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps < 1 {
            return Err(Error::Argument("max_sweeps must be at least 1".into()));
        }
        if !(self.elbo_rel_tol > 0.0) {
            return Err(Error::Argument(format!(
                "elbo_rel_tol must be positive, got {}",
                self.elbo_rel_tol
            )));
        }
        if !(self.jitter_std >= 0.0) {
            return Err(Error::Argument(format!(
                "jitter_std must be nonnegative, got {}",
                self.jitter_std
            )));
        }
        Ok(())
    }
}

/// A converged (or sweep-capped) posterior with its ELBO history.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: VariationalState,
    pub elbo_trace: Vec<f64>,
    pub n_sweeps: usize,
    pub converged: bool,
}

/// JSON form of a [`FitResult`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResultJson {
    pub state: StateJson,
    pub elbo_trace: Vec<f64>,
    pub n_sweeps: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn to_json(&self) -> FitResultJson {
        FitResultJson {
            state: self.state.to_json(),
            elbo_trace: self.elbo_trace.clone(),
            n_sweeps: self.n_sweeps,
            converged: self.converged,
        }
    }

    pub fn from_json(json: &FitResultJson) -> Result<Self> {
        Ok(Self {
            state: VariationalState::from_json(&json.state)?,
            elbo_trace: json.elbo_trace.clone(),
            n_sweeps: json.n_sweeps,
            converged: json.converged,
        })
    }
}

/// Which family of factors an update targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Patient,
    Measurement,
}

/// Row- and column-indexed adjacency over the observed entries.
#[derive(Debug, Clone)]
pub struct SparseView {
    n_rows: usize,
    n_cols: usize,
    row_obs: Vec<Vec<(usize, f64)>>,
    col_obs: Vec<Vec<(usize, f64)>>,
    n_entries: usize,
}

impl SparseView {
    pub fn from_matrix(matrix: &ObservationMatrix) -> Self {
        let mut row_obs = vec![Vec::new(); matrix.n_rows()];
        let mut col_obs = vec![Vec::new(); matrix.n_cols()];
        for e in matrix.entries() {
            row_obs[e.row].push((e.col, e.value));
            col_obs[e.col].push((e.row, e.value));
        }
        Self {
            n_rows: matrix.n_rows(),
            n_cols: matrix.n_cols(),
            row_obs,
            col_obs,
            n_entries: matrix.entries().len(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_entries(&self) -> usize {
        self.n_entries
    }

    pub fn row(&self, u: usize) -> &[(usize, f64)] {
        &self.row_obs[u]
    }

    pub fn col(&self, i: usize) -> &[(usize, f64)] {
        &self.col_obs[i]
    }
}

fn check_state_data(state: &VariationalState, data: &SparseView) -> Result<()> {
    if state.n_rows() != data.n_rows() || state.n_cols() != data.n_cols() {
        return Err(Error::Shape(format!(
            "state is {}x{} but data is {}x{}",
            state.n_rows(),
            state.n_cols(),
            data.n_rows(),
            data.n_cols()
        )));
    }
    Ok(())
}

/// Exact conditional-conjugate update of one trait vector.
///
/// For a patient row u the new covariance is
/// `(prior_var⁻¹ I + noise_var⁻¹ Σ E[R_i R_iᵀ])⁻¹` over the observed
/// columns, and the new mean solves the same precision against
/// `prior_var⁻¹ mu 1 + noise_var⁻¹ Σ m_i (y − b̄_u − b̄_i)`. The
/// measurement side is the mirror image.
pub fn update_trait_vector(
    state: &mut VariationalState,
    data: &SparseView,
    hyper: &Hyperparams,
    side: Side,
    index: usize,
) -> Result<()> {
    check_state_data(state, data)?;
    let t = hyper.n_traits;
    if t == 0 {
        return Err(Error::Argument(
            "trait update requires at least one trait".into(),
        ));
    }
    let (obs, own_bias, prior_mu) = match side {
        Side::Patient => {
            if index >= state.n_rows() {
                return Err(Error::Argument(format!("row {index} out of range")));
            }
            (data.row(index), state.row_bias[index].mean, hyper.mu_p)
        }
        Side::Measurement => {
            if index >= state.n_cols() {
                return Err(Error::Argument(format!("column {index} out of range")));
            }
            (data.col(index), state.col_bias[index].mean, hyper.mu_r)
        }
    };

    let updated = if obs.is_empty() {
        TraitFactor::prior(t, prior_mu, hyper.prior_var)
    } else {
        let inv_prior = 1.0 / hyper.prior_var;
        let inv_noise = 1.0 / hyper.noise_var;
        let mut precision = DMatrix::identity(t, t) * inv_prior;
        let mut rhs = DVector::repeat(t, prior_mu * inv_prior);
        for &(other, y) in obs {
            let (factor, other_bias) = match side {
                Side::Patient => (&state.col_traits[other], state.col_bias[other].mean),
                Side::Measurement => (&state.row_traits[other], state.row_bias[other].mean),
            };
            let residual = y - own_bias - other_bias;
            // E[x xᵀ] = S + m mᵀ
            for b in 0..t {
                let mb = factor.mean[b];
                for a in 0..t {
                    precision[(a, b)] +=
                        inv_noise * (factor.cov[(a, b)] + factor.mean[a] * mb);
                }
            }
            rhs.axpy(inv_noise * residual, &factor.mean, 1.0);
        }
        let chol = Cholesky::new(precision).ok_or_else(|| {
            Error::Numerical(format!("trait precision not positive definite at {index}"))
        })?;
        let mean = chol.solve(&rhs);
        let mut cov = chol.inverse();
        symmetrize(&mut cov);
        TraitFactor { mean, cov }
    };

    match side {
        Side::Patient => state.row_traits[index] = updated,
        Side::Measurement => state.col_traits[index] = updated,
    }
    Ok(())
}

/// Exact conditional-conjugate update of one scalar bias.
pub fn update_bias(
    state: &mut VariationalState,
    data: &SparseView,
    hyper: &Hyperparams,
    side: Side,
    index: usize,
) -> Result<()> {
    check_state_data(state, data)?;
    let (obs, prior_mu) = match side {
        Side::Patient => {
            if index >= state.n_rows() {
                return Err(Error::Argument(format!("row {index} out of range")));
            }
            (data.row(index), hyper.mu_bp)
        }
        Side::Measurement => {
            if index >= state.n_cols() {
                return Err(Error::Argument(format!("column {index} out of range")));
            }
            (data.col(index), hyper.mu_br)
        }
    };

    let updated = if obs.is_empty() {
        BiasFactor {
            mean: prior_mu,
            var: hyper.prior_var,
        }
    } else {
        let inv_prior = 1.0 / hyper.prior_var;
        let inv_noise = 1.0 / hyper.noise_var;
        let mut residual_sum = 0.0;
        for &(other, y) in obs {
            let (own_traits, other_traits, other_bias) = match side {
                Side::Patient => (
                    &state.row_traits[index],
                    &state.col_traits[other],
                    state.col_bias[other].mean,
                ),
                Side::Measurement => (
                    &state.col_traits[index],
                    &state.row_traits[other],
                    state.row_bias[other].mean,
                ),
            };
            residual_sum += y - own_traits.mean.dot(&other_traits.mean) - other_bias;
        }
        let var = 1.0 / (inv_prior + obs.len() as f64 * inv_noise);
        let mean = var * (inv_prior * prior_mu + inv_noise * residual_sum);
        BiasFactor { mean, var }
    };

    match side {
        Side::Patient => state.row_bias[index] = updated,
        Side::Measurement => state.col_bias[index] = updated,
    }
    Ok(())
}

/// One full pass: patient biases, measurement biases, patient traits,
/// measurement traits, each in ascending index order.
pub fn sweep(
    state: &mut VariationalState,
    data: &SparseView,
    hyper: &Hyperparams,
) -> Result<()> {
    check_state_data(state, data)?;
    for u in 0..state.n_rows() {
        update_bias(state, data, hyper, Side::Patient, u)?;
    }
    for i in 0..state.n_cols() {
        update_bias(state, data, hyper, Side::Measurement, i)?;
    }
    if hyper.n_traits > 0 {
        for u in 0..state.n_rows() {
            update_trait_vector(state, data, hyper, Side::Patient, u)?;
        }
        for i in 0..state.n_cols() {
            update_trait_vector(state, data, hyper, Side::Measurement, i)?;
        }
    }
    Ok(())
}

/// Evidence lower bound: expected Gaussian log-likelihood over the observed
/// entries minus the KL from every factor to its prior.
pub fn elbo(state: &VariationalState, data: &SparseView, hyper: &Hyperparams) -> f64 {
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * hyper.noise_var).ln();
    let inv_noise = 1.0 / hyper.noise_var;

    let mut expected_ll = 0.0;
    for u in 0..data.n_rows() {
        let p = &state.row_traits[u];
        let bu = &state.row_bias[u];
        for &(i, y) in data.row(u) {
            let r = &state.col_traits[i];
            let bi = &state.col_bias[i];
            let mean_resid = y - p.mean.dot(&r.mean) - bu.mean - bi.mean;
            let mut esq = mean_resid * mean_resid + bu.var + bi.var;
            if state.n_traits() > 0 {
                esq += trace_product(&p.cov, &r.cov)
                    + quadratic_form(&r.cov, &p.mean)
                    + quadratic_form(&p.cov, &r.mean);
            }
            expected_ll += ln_norm - 0.5 * inv_noise * esq;
        }
    }

    let mut kl = 0.0;
    for (factor, mu) in state
        .row_traits
        .iter()
        .map(|f| (f, hyper.mu_p))
        .chain(state.col_traits.iter().map(|f| (f, hyper.mu_r)))
    {
        kl += gaussian_kl_to_isotropic(factor, mu, hyper.prior_var);
    }
    for (bias, mu) in state
        .row_bias
        .iter()
        .map(|b| (b, hyper.mu_bp))
        .chain(state.col_bias.iter().map(|b| (b, hyper.mu_br)))
    {
        let v = bias.var;
        let d = bias.mean - mu;
        kl += 0.5 * (v / hyper.prior_var + d * d / hyper.prior_var - 1.0
            + (hyper.prior_var / v).ln());
    }

    expected_ll - kl
}

/// KL(N(m, S) || N(mu·1, prior_var·I)).
fn gaussian_kl_to_isotropic(factor: &TraitFactor, mu: f64, prior_var: f64) -> f64 {
    let t = factor.mean.len();
    if t == 0 {
        return 0.0;
    }
    let ln_det = match Cholesky::new(factor.cov.clone()) {
        Some(chol) => 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => return f64::INFINITY,
    };
    let trace: f64 = factor.cov.diagonal().iter().sum();
    let dev: f64 = factor.mean.iter().map(|&m| (m - mu) * (m - mu)).sum();
    0.5 * (trace / prior_var + dev / prior_var - t as f64 + t as f64 * prior_var.ln() - ln_det)
}

/// Runs CAVI sweeps until the relative ELBO change drops below tolerance
/// or the sweep cap is reached.
pub fn fit(data: &ObservationMatrix, hyper: &Hyperparams, config: &FitConfig) -> Result<FitResult> {
    hyper.validate_for_fit()?;
    config.validate()?;
    if data.entries().is_empty() {
        return Err(Error::Argument("cannot fit an empty matrix".into()));
    }
    let view = SparseView::from_matrix(data);
    let mut state = VariationalState::init(
        hyper,
        data.n_rows(),
        data.n_cols(),
        config.seed,
        config.jitter_std,
    )?;

    let mut elbo_trace = Vec::new();
    let mut converged = false;
    for sweep_idx in 0..config.max_sweeps {
        sweep(&mut state, &view, hyper)?;
        let value = elbo(&state, &view, hyper);
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite ELBO {value} at sweep {}",
                sweep_idx + 1
            )));
        }
        elbo_trace.push(value);
        if elbo_trace.len() >= 2 {
            let prev = elbo_trace[elbo_trace.len() - 2];
            if (value - prev).abs() <= config.elbo_rel_tol * value.abs() {
                converged = true;
                break;
            }
        }
    }

    Ok(FitResult {
        n_sweeps: elbo_trace.len(),
        state,
        elbo_trace,
        converged,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in (a + 1)..m.ncols() {
            let avg = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = avg;
            m[(b, a)] = avg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entry;
    use crate::model::generate_synthetic;

    fn matrix_from(
        n_rows: usize,
        n_cols: usize,
        cells: &[(usize, usize, f64)],
    ) -> ObservationMatrix {
        let entries = cells
            .iter()
            .map(|&(row, col, value)| Entry { row, col, value })
            .collect();
        let row_ids = (0..n_rows).map(|r| r.to_string()).collect();
        let col_names = (0..n_cols).map(|c| format!("c{c}")).collect();
        ObservationMatrix::new(n_rows, n_cols, entries, row_ids, col_names).unwrap()
    }

    fn one_trait_hyper() -> Hyperparams {
        Hyperparams {
            n_traits: 1,
            mu_p: 0.0,
            mu_r: 0.0,
            mu_bp: 0.0,
            mu_br: 0.0,
            prior_var: 0.5,
            noise_var: 0.01,
        }
    }

    #[test]
    fn trait_update_with_no_observations_returns_prior() {
        let hyper = one_trait_hyper();
        // row 1 has no entries
        let m = matrix_from(2, 1, &[(0, 0, 0.5)]);
        let view = SparseView::from_matrix(&m);
        let mut state = VariationalState::init(&hyper, 2, 1, 0, 0.01).unwrap();
        update_trait_vector(&mut state, &view, &hyper, Side::Patient, 1).unwrap();
        assert_eq!(state.row_traits[1].mean[0], 0.0);
        assert_eq!(state.row_traits[1].cov[(0, 0)], 0.5);
    }

    #[test]
    fn trait_update_single_observation_worked_numbers() {
        let hyper = one_trait_hyper();
        // One observation for patient 0; biases arranged so the residual is 0.2.
        let m = matrix_from(1, 1, &[(0, 0, 0.2)]);
        let view = SparseView::from_matrix(&m);
        let mut state = VariationalState::init(&hyper, 1, 1, 0, 0.0).unwrap();
        state.col_traits[0].mean[0] = 0.5;
        state.col_traits[0].cov[(0, 0)] = 0.1;
        state.row_bias[0].mean = 0.0;
        state.col_bias[0].mean = 0.0;
        update_trait_vector(&mut state, &view, &hyper, Side::Patient, 0).unwrap();
        // precision = 2 + (0.1 + 0.25)/0.01 = 37
        assert!((state.row_traits[0].cov[(0, 0)] - 1.0 / 37.0).abs() < 1e-12);
        assert!((state.row_traits[0].mean[0] - 10.0 / 37.0).abs() < 1e-12);
    }

    #[test]
    fn trait_update_likelihood_terms_are_additive() {
        let hyper = one_trait_hyper();
        // Two measurement columns with identical factors and values double
        // the likelihood precision relative to one.
        let single = matrix_from(1, 1, &[(0, 0, 0.3)]);
        let double = matrix_from(1, 2, &[(0, 0, 0.3), (0, 1, 0.3)]);
        let prep = |m: &ObservationMatrix, cols: usize| {
            let mut s = VariationalState::init(&hyper, 1, cols, 0, 0.0).unwrap();
            for c in 0..cols {
                s.col_traits[c].mean[0] = 0.4;
                s.col_traits[c].cov[(0, 0)] = 0.05;
            }
            let v = SparseView::from_matrix(m);
            (s, v)
        };
        let (mut s1, v1) = prep(&single, 1);
        update_trait_vector(&mut s1, &v1, &hyper, Side::Patient, 0).unwrap();
        let (mut s2, v2) = prep(&double, 2);
        update_trait_vector(&mut s2, &v2, &hyper, Side::Patient, 0).unwrap();
        let contribution = (0.05 + 0.4 * 0.4) / hyper.noise_var;
        let prec1 = 1.0 / s1.row_traits[0].cov[(0, 0)];
        let prec2 = 1.0 / s2.row_traits[0].cov[(0, 0)];
        assert!((prec2 - prec1 - contribution).abs() < 1e-9);
    }

    #[test]
    fn bias_update_examples() {
        let hyper = one_trait_hyper();
        let m = matrix_from(2, 1, &[(0, 0, 0.3)]);
        let view = SparseView::from_matrix(&m);
        let mut state = VariationalState::init(&hyper, 2, 1, 0, 0.0).unwrap();
        // traits and other bias are zero, so the residual is y = 0.3
        update_bias(&mut state, &view, &hyper, Side::Patient, 0).unwrap();
        assert!((state.row_bias[0].var - 1.0 / 102.0).abs() < 1e-15);
        assert!((state.row_bias[0].mean - 30.0 / 102.0).abs() < 1e-12);
        // row 1 has no observations: posterior equals prior
        update_bias(&mut state, &view, &hyper, Side::Patient, 1).unwrap();
        assert_eq!(state.row_bias[1].mean, 0.0);
        assert_eq!(state.row_bias[1].var, 0.5);
    }

    #[test]
    fn bias_update_zero_residuals_gives_zero_mean() {
        let hyper = one_trait_hyper();
        let m = matrix_from(1, 3, &[(0, 0, 0.0), (0, 1, 0.0), (0, 2, 0.0)]);
        let view = SparseView::from_matrix(&m);
        let mut state = VariationalState::init(&hyper, 1, 3, 0, 0.0).unwrap();
        update_bias(&mut state, &view, &hyper, Side::Patient, 0).unwrap();
        assert_eq!(state.row_bias[0].mean, 0.0);
    }

    #[test]
    fn sweep_on_empty_data_is_noop_without_jitter() {
        let hyper = Hyperparams { n_traits: 2, ..Hyperparams::default() };
        let m = matrix_from(3, 2, &[]);
        let view = SparseView::from_matrix(&m);
        let mut state = VariationalState::init(&hyper, 3, 2, 0, 0.0).unwrap();
        let before = state.clone();
        sweep(&mut state, &view, &hyper).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn converged_fit_is_a_fixed_point() {
        let hyper = Hyperparams {
            n_traits: 2,
            mu_bp: 0.2,
            mu_br: 0.1,
            ..Hyperparams::default()
        };
        let inst = generate_synthetic(6, 5, &hyper, 0.3, 11).unwrap();
        // Tolerance low enough that all 2000 sweeps run; the state lands on
        // the fixed point to machine precision.
        let config = FitConfig {
            max_sweeps: 2000,
            elbo_rel_tol: 1e-300,
            seed: 1,
            jitter_std: 0.01,
        };
        let result = fit(&inst.observed, &hyper, &config).unwrap();
        let view = SparseView::from_matrix(&inst.observed);
        let mut after = result.state.clone();
        sweep(&mut after, &view, &hyper).unwrap();
        let mut max_change = 0.0f64;
        for (a, b) in result.state.row_traits.iter().zip(&after.row_traits) {
            max_change = max_change.max((&a.mean - &b.mean).abs().max());
            max_change = max_change.max((&a.cov - &b.cov).abs().max());
        }
        for (a, b) in result.state.col_traits.iter().zip(&after.col_traits) {
            max_change = max_change.max((&a.mean - &b.mean).abs().max());
            max_change = max_change.max((&a.cov - &b.cov).abs().max());
        }
        for (a, b) in result.state.row_bias.iter().zip(&after.row_bias) {
            max_change = max_change.max((a.mean - b.mean).abs());
            max_change = max_change.max((a.var - b.var).abs());
        }
        for (a, b) in result.state.col_bias.iter().zip(&after.col_bias) {
            max_change = max_change.max((a.mean - b.mean).abs());
            max_change = max_change.max((a.var - b.var).abs());
        }
        assert!(max_change < 1e-10, "max change {max_change}");
    }

    #[test]
    fn repeated_factor_update_is_noop() {
        let hyper = one_trait_hyper();
        let inst = generate_synthetic(4, 3, &hyper, 0.2, 5).unwrap();
        let view = SparseView::from_matrix(&inst.observed);
        let mut state = VariationalState::init(&hyper, 4, 3, 0, 0.01).unwrap();
        update_trait_vector(&mut state, &view, &hyper, Side::Patient, 0).unwrap();
        let once = state.row_traits[0].clone();
        update_trait_vector(&mut state, &view, &hyper, Side::Patient, 0).unwrap();
        assert!((&once.mean - &state.row_traits[0].mean).abs().max() < 1e-12);
        assert!((&once.cov - &state.row_traits[0].cov).abs().max() < 1e-12);
        update_bias(&mut state, &view, &hyper, Side::Measurement, 1).unwrap();
        let once = state.col_bias[1];
        update_bias(&mut state, &view, &hyper, Side::Measurement, 1).unwrap();
        assert!((once.mean - state.col_bias[1].mean).abs() < 1e-12);
        assert!((once.var - state.col_bias[1].var).abs() < 1e-12);
    }

    #[test]
    fn elbo_zero_for_prior_on_empty_data() {
        let hyper = Hyperparams { n_traits: 2, ..Hyperparams::default() };
        let m = matrix_from(2, 2, &[]);
        let view = SparseView::from_matrix(&m);
        let state = VariationalState::init(&hyper, 2, 2, 0, 0.0).unwrap();
        assert!(elbo(&state, &view, &hyper).abs() < 1e-12);
    }

    #[test]
    fn elbo_at_prior_is_expected_log_likelihood_only() {
        // T = 0, biases at prior (mean 0, var 0.5), one observation y = 0.3:
        // E[(y - b_u - b_i)^2] = y^2 + 1.0 and the KL term vanishes.
        let hyper = Hyperparams { n_traits: 0, ..Hyperparams::default() };
        let y = 0.3;
        let m = matrix_from(1, 1, &[(0, 0, y)]);
        let view = SparseView::from_matrix(&m);
        let state = VariationalState::init(&hyper, 1, 1, 0, 0.0).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * hyper.noise_var).ln()
            - (y * y + 1.0) / (2.0 * hyper.noise_var);
        assert!((elbo(&state, &view, &hyper) - expected).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_empty_data_and_degenerate_hyper() {
        let m = matrix_from(2, 2, &[]);
        let err = fit(&m, &Hyperparams::default(), &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));

        let m = matrix_from(1, 1, &[(0, 0, 0.5)]);
        let degenerate = Hyperparams { noise_var: 0.0, ..Hyperparams::default() };
        assert!(fit(&m, &degenerate, &FitConfig::default()).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let hyper = Hyperparams { n_traits: 2, ..Hyperparams::default() };
        let inst = generate_synthetic(8, 6, &hyper, 0.4, 21).unwrap();
        let config = FitConfig { seed: 3, ..FitConfig::default() };
        let a = fit(&inst.observed, &hyper, &config).unwrap();
        let b = fit(&inst.observed, &hyper, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn elbo_trace_is_monotone_on_random_instances() {
        for seed in 0..5u64 {
            let hyper = Hyperparams {
                n_traits: 2,
                mu_bp: 0.3,
                mu_br: 0.2,
                ..Hyperparams::default()
            };
            let inst = generate_synthetic(10, 8, &hyper, 0.5, seed).unwrap();
            let result = fit(&inst.observed, &hyper, &FitConfig::default()).unwrap();
            for w in result.elbo_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "ELBO dropped: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn fit_respects_sweep_cap_and_flags_convergence() {
        let hyper = one_trait_hyper();
        let inst = generate_synthetic(6, 4, &hyper, 0.3, 2).unwrap();
        let capped = FitConfig {
            max_sweeps: 1,
            ..FitConfig::default()
        };
        let r = fit(&inst.observed, &hyper, &capped).unwrap();
        assert_eq!(r.n_sweeps, 1);
        assert!(!r.converged);
        assert_eq!(r.elbo_trace.len(), 1);

        let loose = FitConfig {
            max_sweeps: 2000,
            elbo_rel_tol: 1e-8,
            ..FitConfig::default()
        };
        let r = fit(&inst.observed, &hyper, &loose).unwrap();
        assert!(r.converged);
        assert!(r.n_sweeps < 2000);
    }

    #[test]
    fn factors_without_observations_stay_at_prior_after_fit() {
        let hyper = Hyperparams {
            n_traits: 2,
            mu_p: 0.1,
            mu_r: 0.2,
            mu_bp: 0.3,
            mu_br: 0.4,
            ..Hyperparams::default()
        };
        // row 2 and column 2 are empty
        let m = matrix_from(3, 3, &[(0, 0, 0.6), (0, 1, 0.4), (1, 0, 0.5), (1, 1, 0.7)]);
        let result = fit(&m, &hyper, &FitConfig::default()).unwrap();
        let empty_row = &result.state.row_traits[2];
        assert!(empty_row.mean.iter().all(|&v| v == 0.1));
        assert_eq!(empty_row.cov, DMatrix::identity(2, 2) * 0.5);
        assert_eq!(result.state.row_bias[2].mean, 0.3);
        assert_eq!(result.state.row_bias[2].var, 0.5);
        let empty_col = &result.state.col_traits[2];
        assert!(empty_col.mean.iter().all(|&v| v == 0.2));
        assert_eq!(result.state.col_bias[2].mean, 0.4);
        assert_eq!(result.state.col_bias[2].var, 0.5);
    }

    #[test]
    fn sweep_order_does_not_change_converged_predictions() {
        let hyper = Hyperparams {
            n_traits: 1,
            mu_bp: 0.2,
            mu_br: 0.3,
            ..Hyperparams::default()
        };
        let inst = generate_synthetic(8, 6, &hyper, 0.3, 17).unwrap();
        let view = SparseView::from_matrix(&inst.observed);
        let config = FitConfig {
            max_sweeps: 3000,
            elbo_rel_tol: 1e-300,
            seed: 4,
            jitter_std: 0.01,
        };
        let reference = fit(&inst.observed, &hyper, &config).unwrap();

        // Same updates scheduled in a different order.
        let mut state = VariationalState::init(&hyper, 8, 6, config.seed, 0.01).unwrap();
        for _ in 0..3000 {
            for i in 0..6 {
                update_bias(&mut state, &view, &hyper, Side::Measurement, i).unwrap();
            }
            for i in 0..6 {
                update_trait_vector(&mut state, &view, &hyper, Side::Measurement, i).unwrap();
            }
            for u in 0..8 {
                update_bias(&mut state, &view, &hyper, Side::Patient, u).unwrap();
            }
            for u in 0..8 {
                update_trait_vector(&mut state, &view, &hyper, Side::Patient, u).unwrap();
            }
        }
        for u in 0..8 {
            for i in 0..6 {
                let a = reference.state.predict_mean(u, i).unwrap();
                let b = state.predict_mean(u, i).unwrap();
                assert!((a - b).abs() < 1e-6, "({u},{i}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn fit_result_json_round_trip() {
        let hyper = one_trait_hyper();
        let inst = generate_synthetic(4, 3, &hyper, 0.2, 8).unwrap();
        let result = fit(&inst.observed, &hyper, &FitConfig::default()).unwrap();
        let text = serde_json::to_string(&result.to_json()).unwrap();
        let parsed: FitResultJson = serde_json::from_str(&text).unwrap();
        let back = FitResult::from_json(&parsed).unwrap();
        assert_eq!(back, result);
    }
}
