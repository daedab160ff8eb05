//! The bilinear latent-trait model with per-patient and per-measurement
//! biases: a cell (u, i) is predicted by the dot product of the two trait
//! vectors plus both biases. Holds the hyperparameters, the factorized
//! Gaussian posterior, plug-in prediction, and the matching synthetic-data
//! generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Entry, ObservationMatrix};
use crate::error::{Error, Result};

/// Prior means and variances of the latent factors, the trait count, and
/// the observation-noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_traits: usize,
    pub mu_p: f64,
    pub mu_r: f64,
    pub mu_bp: f64,
    pub mu_br: f64,
    pub prior_var: f64,
    pub noise_var: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            n_traits: 4,
            mu_p: 0.0,
            mu_r: 0.0,
            mu_bp: 0.0,
            mu_br: 0.0,
            prior_var: 0.5,
            noise_var: 0.01,
        }
    }
}

impl Hyperparams {
    /// Generation accepts degenerate (zero) variances; inference does not.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mu_p", self.mu_p),
            ("mu_r", self.mu_r),
            ("mu_bp", self.mu_bp),
            ("mu_br", self.mu_br),
            ("prior_var", self.prior_var),
            ("noise_var", self.noise_var),
        ] {
            if !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be finite, got {v}")));
            }
        }
        if self.prior_var < 0.0 || self.noise_var < 0.0 {
            return Err(Error::Argument(format!(
                "variances must be nonnegative, got prior_var {} noise_var {}",
                self.prior_var, self.noise_var
            )));
        }
        Ok(())
    }

    pub fn validate_for_fit(&self) -> Result<()> {
        self.validate()?;
        if self.prior_var <= 0.0 || self.noise_var <= 0.0 {
            return Err(Error::Argument(format!(
                "inference needs strictly positive variances, got prior_var {} noise_var {}",
                self.prior_var, self.noise_var
            )));
        }
        Ok(())
    }
}

/// Gaussian posterior over one trait vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitFactor {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl TraitFactor {
    pub fn prior(n_traits: usize, mu: f64, prior_var: f64) -> Self {
        Self {
            mean: DVector::repeat(n_traits, mu),
            cov: DMatrix::identity(n_traits, n_traits) * prior_var,
        }
    }
}

/// Gaussian posterior over one scalar bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasFactor {
    pub mean: f64,
    pub var: f64,
}

/// Fully factorized Gaussian posterior over all latents.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    n_traits: usize,
    pub row_traits: Vec<TraitFactor>,
    pub col_traits: Vec<TraitFactor>,
    pub row_bias: Vec<BiasFactor>,
    pub col_bias: Vec<BiasFactor>,
}

impl VariationalState {
    /// Every factor starts at its prior; trait means get seeded Gaussian
    /// jitter of the given standard deviation to break symmetry between
    /// trait dimensions.
    pub fn init(
        hyper: &Hyperparams,
        n_rows: usize,
        n_cols: usize,
        seed: u64,
        jitter_std: f64,
    ) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Argument(format!(
                "state needs at least one row and one column, got {n_rows}x{n_cols}"
            )));
        }
        if !(jitter_std >= 0.0) {
            return Err(Error::Argument(format!(
                "jitter_std must be nonnegative, got {jitter_std}"
            )));
        }
        hyper.validate_for_fit()?;
        let t = hyper.n_traits;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jittered = |mu: f64| {
            let mut factor = TraitFactor::prior(t, mu, hyper.prior_var);
            for v in factor.mean.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += jitter_std * z;
            }
            factor
        };
        let row_traits = (0..n_rows).map(|_| jittered(hyper.mu_p)).collect();
        let col_traits = (0..n_cols).map(|_| jittered(hyper.mu_r)).collect();
        let row_bias = vec![
            BiasFactor { mean: hyper.mu_bp, var: hyper.prior_var };
            n_rows
        ];
        let col_bias = vec![
            BiasFactor { mean: hyper.mu_br, var: hyper.prior_var };
            n_cols
        ];
        Ok(Self {
            n_traits: t,
            row_traits,
            col_traits,
            row_bias,
            col_bias,
        })
    }

    pub fn n_traits(&self) -> usize {
        self.n_traits
    }

    pub fn n_rows(&self) -> usize {
        self.row_traits.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_traits.len()
    }

    fn check_indices(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.n_rows() || col >= self.n_cols() {
            return Err(Error::Argument(format!(
                "cell ({row}, {col}) outside a {}x{} state",
                self.n_rows(),
                self.n_cols()
            )));
        }
        Ok(())
    }

    /// Posterior-mean plug-in prediction: trait dot product plus biases.
    pub fn predict_mean(&self, row: usize, col: usize) -> Result<f64> {
        self.check_indices(row, col)?;
        Ok(self.predict_mean_unchecked(row, col))
    }

    pub(crate) fn predict_mean_unchecked(&self, row: usize, col: usize) -> f64 {
        self.row_traits[row].mean.dot(&self.col_traits[col].mean)
            + self.row_bias[row].mean
            + self.col_bias[col].mean
    }

    /// Predictive mean and exact second-moment variance under the
    /// factorized posterior, including observation noise.
    pub fn predict_with_variance(
        &self,
        hyper: &Hyperparams,
        row: usize,
        col: usize,
    ) -> Result<(f64, f64)> {
        self.check_indices(row, col)?;
        let p = &self.row_traits[row];
        let r = &self.col_traits[col];
        let mut var = hyper.noise_var + self.row_bias[row].var + self.col_bias[col].var;
        var += trace_product(&p.cov, &r.cov);
        var += quadratic_form(&r.cov, &p.mean);
        var += quadratic_form(&p.cov, &r.mean);
        Ok((self.predict_mean_unchecked(row, col), var))
    }
}

/// trace(A B) for symmetric A, B of equal size.
pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// xᵀ A x.
pub(crate) fn quadratic_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        let xj = x[j];
        for i in 0..a.nrows() {
            acc += x[i] * a[(i, j)] * xj;
        }
    }
    acc
}

/// Ground truth and masked noisy observations drawn from the generative
/// process.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    /// N×T patient trait matrix.
    pub patient_traits: DMatrix<f64>,
    /// M×T measurement trait matrix.
    pub measurement_traits: DMatrix<f64>,
    pub patient_bias: DVector<f64>,
    pub measurement_bias: DVector<f64>,
    /// Noise-free full matrix.
    pub clean: DMatrix<f64>,
    /// Noisy observations at the unmasked cells.
    pub observed: ObservationMatrix,
    pub seed: u64,
    pub noise_seed: u64,
    pub mask_seed: u64,
}

/// Samples latents from the priors, builds the clean matrix, adds Gaussian
/// observation noise, and masks a uniformly random subset of cells.
pub fn generate_synthetic(
    n_rows: usize,
    n_cols: usize,
    hyper: &Hyperparams,
    missing_fraction: f64,
    seed: u64,
) -> Result<SyntheticInstance> {
    hyper.validate()?;
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::Argument(format!(
            "matrix must be at least 1x1, got {n_rows}x{n_cols}"
        )));
    }
    if !(0.0..1.0).contains(&missing_fraction) {
        return Err(Error::Argument(format!(
            "missing_fraction must lie in [0, 1), got {missing_fraction}"
        )));
    }
    let t = hyper.n_traits;
    let prior_std = hyper.prior_var.sqrt();
    let noise_std = hyper.noise_var.sqrt();

    let mut latent_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |mu: f64, std: f64, rng: &mut ChaCha8Rng| {
        let z: f64 = rng.sample(StandardNormal);
        mu + std * z
    };
    let patient_traits =
        DMatrix::from_fn(n_rows, t, |_, _| draw(hyper.mu_p, prior_std, &mut latent_rng));
    let measurement_traits =
        DMatrix::from_fn(n_cols, t, |_, _| draw(hyper.mu_r, prior_std, &mut latent_rng));
    let patient_bias =
        DVector::from_fn(n_rows, |_, _| draw(hyper.mu_bp, prior_std, &mut latent_rng));
    let measurement_bias =
        DVector::from_fn(n_cols, |_, _| draw(hyper.mu_br, prior_std, &mut latent_rng));

    let mut clean = DMatrix::zeros(n_rows, n_cols);
    for u in 0..n_rows {
        for i in 0..n_cols {
            clean[(u, i)] = patient_traits.row(u).dot(&measurement_traits.row(i))
                + patient_bias[u]
                + measurement_bias[i];
        }
    }

    let noise_seed = seed.wrapping_add(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noisy = DMatrix::from_fn(n_rows, n_cols, |u, i| {
        clean[(u, i)] + draw(0.0, noise_std, &mut noise_rng)
    });

    let total = n_rows * n_cols;
    let n_missing = (missing_fraction * total as f64).floor() as usize;
    if total - n_missing < 1 {
        return Err(Error::Argument(
            "missing_fraction leaves no observed entry".into(),
        ));
    }
    let mask_seed = seed.wrapping_add(2);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mut masked = vec![false; total];
    for idx in rand::seq::index::sample(&mut mask_rng, total, n_missing) {
        masked[idx] = true;
    }

    let mut entries = Vec::with_capacity(total - n_missing);
    for u in 0..n_rows {
        for i in 0..n_cols {
            if !masked[u * n_cols + i] {
                entries.push(Entry {
                    row: u,
                    col: i,
                    value: noisy[(u, i)],
                });
            }
        }
    }
    let row_ids = (0..n_rows).map(|u| format!("p{u}")).collect();
    let col_names = (0..n_cols).map(|i| format!("m{i}")).collect();
    let observed = ObservationMatrix::new(n_rows, n_cols, entries, row_ids, col_names)?;

    Ok(SyntheticInstance {
        patient_traits,
        measurement_traits,
        patient_bias,
        measurement_bias,
        clean,
        observed,
        seed,
        noise_seed,
        mask_seed,
    })
}

/// JSON representation of a [`VariationalState`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateJson {
    #[serde(rename = "T")]
    pub n_traits: usize,
    pub row_trait_means: Vec<Vec<f64>>,
    /// Row-major T×T covariance per patient.
    pub row_trait_covs: Vec<Vec<f64>>,
    pub col_trait_means: Vec<Vec<f64>>,
    pub col_trait_covs: Vec<Vec<f64>>,
    pub row_bias_means: Vec<f64>,
    pub row_bias_vars: Vec<f64>,
    pub col_bias_means: Vec<f64>,
    pub col_bias_vars: Vec<f64>,
}

impl VariationalState {
    pub fn to_json(&self) -> StateJson {
        let t = self.n_traits;
        let means = |factors: &[TraitFactor]| -> Vec<Vec<f64>> {
            factors.iter().map(|f| f.mean.iter().copied().collect()).collect()
        };
        let covs = |factors: &[TraitFactor]| -> Vec<Vec<f64>> {
            factors
                .iter()
                .map(|f| {
                    let mut flat = Vec::with_capacity(t * t);
                    for a in 0..t {
                        for b in 0..t {
                            flat.push(f.cov[(a, b)]);
                        }
                    }
                    flat
                })
                .collect()
        };
        StateJson {
            n_traits: t,
            row_trait_means: means(&self.row_traits),
            row_trait_covs: covs(&self.row_traits),
            col_trait_means: means(&self.col_traits),
            col_trait_covs: covs(&self.col_traits),
            row_bias_means: self.row_bias.iter().map(|b| b.mean).collect(),
            row_bias_vars: self.row_bias.iter().map(|b| b.var).collect(),
            col_bias_means: self.col_bias.iter().map(|b| b.mean).collect(),
            col_bias_vars: self.col_bias.iter().map(|b| b.var).collect(),
        }
    }

    pub fn from_json(json: &StateJson) -> Result<Self> {
        let t = json.n_traits;
        let build = |means: &[Vec<f64>], covs: &[Vec<f64>]| -> Result<Vec<TraitFactor>> {
            if means.len() != covs.len() {
                return Err(Error::Shape(format!(
                    "{} trait means but {} covariances",
                    means.len(),
                    covs.len()
                )));
            }
            means
                .iter()
                .zip(covs)
                .map(|(m, c)| {
                    if m.len() != t || c.len() != t * t {
                        return Err(Error::Shape(format!(
                            "trait factor with {} means and {} covariance elements for T = {t}",
                            m.len(),
                            c.len()
                        )));
                    }
                    let mean = DVector::from_row_slice(m);
                    let cov = DMatrix::from_row_slice(t, t, c);
                    Ok(TraitFactor { mean, cov })
                })
                .collect()
        };
        let biases = |means: &[f64], vars: &[f64]| -> Result<Vec<BiasFactor>> {
            if means.len() != vars.len() {
                return Err(Error::Shape(format!(
                    "{} bias means but {} variances",
                    means.len(),
                    vars.len()
                )));
            }
            Ok(means
                .iter()
                .zip(vars)
                .map(|(&mean, &var)| BiasFactor { mean, var })
                .collect())
        };
        let state = Self {
            n_traits: t,
            row_traits: build(&json.row_trait_means, &json.row_trait_covs)?,
            col_traits: build(&json.col_trait_means, &json.col_trait_covs)?,
            row_bias: biases(&json.row_bias_means, &json.row_bias_vars)?,
            col_bias: biases(&json.col_bias_means, &json.col_bias_vars)?,
        };
        if state.row_traits.is_empty() || state.col_traits.is_empty() {
            return Err(Error::Shape("state must have rows and columns".into()));
        }
        if state.row_traits.len() != state.row_bias.len()
            || state.col_traits.len() != state.col_bias.len()
        {
            return Err(Error::Shape(
                "trait and bias factor counts disagree".into(),
            ));
        }
        Ok(state)
    }
}
