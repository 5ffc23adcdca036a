//! Gaussian-process regression of dynamics residuals.
//!
//! Each modeled state-derivative component gets its own [`GpModel`]
//! (components are independent; there is no cross-covariance). The
//! [`UncertaintyModel`] combines them into the band `mean ± e·std`, where the
//! tuning variable `e` lives in the box `|e|∞ ≤ √2·erf⁻¹(p)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::optim::NelderMead;

/// Diagonal jitter levels tried in turn when `K + σ_n²I` fails to factor,
/// relative to the signal variance.
const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub input: Vec<f64>,
    pub target: f64,
}

/// Squared-exponential ARD kernel parameters plus a constant prior mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_var: f64,
    pub length_scales: Vec<f64>,
    pub noise_std: f64,
    pub mean: f64,
}

impl KernelParams {
    pub fn new(signal_var: f64, length_scales: Vec<f64>, noise_std: f64, mean: f64) -> Self {
        Self { signal_var, length_scales, noise_std, mean }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.signal_var > 0.0
            && self.signal_var.is_finite()
            && self.length_scales.iter().all(|l| *l > 0.0 && l.is_finite())
            && self.noise_std >= 0.0
            && self.noise_std.is_finite()
            && self.mean.is_finite();
        if ok {
            Ok(())
        } else {
            usage(format!("invalid kernel parameters {self:?}"))
        }
    }
}

/// `σ_f²·exp(−½ Σ ((aᵢ−bᵢ)/ℓᵢ)²)`.
pub fn kernel(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    let d = params.length_scales.len();
    if a.len() != d || b.len() != d {
        return usage(format!(
            "kernel inputs have dims {} and {}, length scales have {d}",
            a.len(),
            b.len()
        ));
    }
    Ok(kernel_unchecked(a, b, params))
}

#[inline]
fn kernel_unchecked(a: &[f64], b: &[f64], params: &KernelParams) -> f64 {
    let mut q = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(&params.length_scales) {
        let t = (x - y) / l;
        q += t * t;
    }
    params.signal_var * (-0.5 * q).exp()
}

/// A single-output GP conditioned on its training data.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    params: KernelParams,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    jitter: f64,
    /// Set when hyperparameter search failed everywhere and `init` was kept.
    pub fit_warning: bool,
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on `(inputs, targets)`.
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>, params: KernelParams) -> Result<Self> {
        params.validate()?;
        if inputs.len() != targets.len() {
            return usage(format!("{} inputs but {} targets", inputs.len(), targets.len()));
        }
        let d = params.length_scales.len();
        for x in &inputs {
            if x.len() != d {
                return usage(format!("input of dim {} for a {d}-D kernel", x.len()));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return usage("non-finite training input");
            }
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return usage("non-finite training target");
        }
        let n = inputs.len();
        if n == 0 {
            return Ok(Self {
                inputs,
                targets,
                params,
                chol: None,
                alpha: DVector::zeros(0),
                jitter: 0.0,
                fit_warning: false,
            });
        }
        let noise = params.noise_std * params.noise_std;
        let base = DMatrix::from_fn(n, n, |i, j| {
            kernel_unchecked(&inputs[i], &inputs[j], &params) + if i == j { noise } else { 0.0 }
        });
        let mut last_jitter = 0.0;
        for rel in JITTER_LADDER {
            let jitter = rel * params.signal_var.max(noise);
            last_jitter = jitter;
            let mut k = base.clone();
            for i in 0..n {
                k[(i, i)] += jitter;
            }
            if let Some(chol) = k.cholesky() {
                let resid = DVector::from_iterator(n, targets.iter().map(|t| t - params.mean));
                let alpha = chol.solve(&resid);
                return Ok(Self {
                    inputs,
                    targets,
                    params,
                    chol: Some(chol),
                    alpha,
                    jitter,
                    fit_warning: false,
                });
            }
        }
        Err(Error::Numerical(format!(
            "covariance not positive definite even with jitter {last_jitter:e}"
        )))
    }

    /// A model with no data; its posterior is the prior.
    pub fn prior(params: KernelParams) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), params)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn input_dim(&self) -> usize {
        self.params.length_scales.len()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Gaussian log evidence of the targets under the prior mean and
    /// `K + σ_n²I` (plus whatever jitter the factorization needed).
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.targets.len();
        let Some(chol) = &self.chol else {
            return 0.0;
        };
        let l = chol.l_dirty();
        let mut log_det_half = 0.0;
        for i in 0..n {
            log_det_half += l[(i, i)].ln();
        }
        let fit: f64 = self
            .targets
            .iter()
            .zip(self.alpha.iter())
            .map(|(t, a)| (t - self.params.mean) * a)
            .sum();
        -0.5 * fit - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Posterior mean and standard deviation of the latent function at `x`.
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.input_dim() {
            return usage(format!("query of dim {} for a {}-D GP", x.len(), self.input_dim()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return usage("non-finite query point");
        }
        let prior_var = self.params.signal_var;
        let Some(chol) = &self.chol else {
            return Ok((self.params.mean, prior_var.sqrt()));
        };
        let n = self.inputs.len();
        let kstar = DVector::from_iterator(
            n,
            self.inputs.iter().map(|xi| kernel_unchecked(x, xi, &self.params)),
        );
        let mean = self.params.mean + kstar.dot(&self.alpha);
        let v = chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let var = (prior_var - v.norm_squared()).max(0.0);
        Ok((mean, var.sqrt()))
    }

    /// Fits hyperparameters by multi-start Nelder–Mead on the log marginal
    /// likelihood over `(ln σ_f, ln ℓ, ln σ_n, μ₀)`. The returned model is
    /// never worse than `init` on the same data.
    pub fn fit(observations: &[Observation], init: &KernelParams) -> Result<Self> {
        if observations.is_empty() {
            return usage("fit needs at least one observation");
        }
        init.validate()?;
        let d = init.length_scales.len();
        let inputs: Vec<Vec<f64>> = observations.iter().map(|o| o.input.clone()).collect();
        let targets: Vec<f64> = observations.iter().map(|o| o.target).collect();

        let n = targets.len() as f64;
        let y_mean = targets.iter().sum::<f64>() / n;
        let y_var = targets.iter().map(|t| (t - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = y_var.sqrt();

        let to_theta = |p: &KernelParams| -> Vec<f64> {
            let mut th = Vec::with_capacity(d + 3);
            th.push(0.5 * p.signal_var.ln());
            th.extend(p.length_scales.iter().map(|l| l.ln()));
            th.push(p.noise_std.max(1e-6).ln());
            th.push(p.mean);
            th
        };
        let from_theta = |th: &[f64]| -> KernelParams {
            KernelParams {
                signal_var: (2.0 * th[0]).exp(),
                length_scales: th[1..=d].iter().map(|v| v.exp()).collect(),
                noise_std: th[d + 1].exp(),
                mean: th[d + 2],
            }
        };
        let mean_span = 10.0 * (y_std + y_mean.abs() + 1.0);
        let mut bounds = vec![(1e-4f64.ln(), 1e3f64.ln())];
        bounds.extend(std::iter::repeat((1e-3f64.ln(), 1e3f64.ln())).take(d));
        bounds.push((1e-6f64.ln(), 1e2f64.ln()));
        bounds.push((-mean_span, mean_span));

        let objective = |th: &[f64]| -> f64 {
            match GpModel::new(inputs.clone(), targets.clone(), from_theta(th)) {
                Ok(m) => -m.log_marginal_likelihood(),
                Err(_) => f64::INFINITY,
            }
        };

        let mut starts = vec![to_theta(init)];
        for scale in [0.3, 3.0] {
            let mut p = init.clone();
            p.length_scales.iter_mut().for_each(|l| *l *= scale);
            starts.push(to_theta(&p));
        }
        if y_std > 0.0 {
            starts.push(to_theta(&KernelParams {
                signal_var: y_var,
                length_scales: init.length_scales.clone(),
                noise_std: 0.1 * y_std,
                mean: y_mean,
            }));
        }

        let init_model = GpModel::new(inputs.clone(), targets.clone(), init.clone());
        let init_nll = init_model
            .as_ref()
            .map(|m| -m.log_marginal_likelihood())
            .unwrap_or(f64::INFINITY);

        let nm = NelderMead::default();
        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in &starts {
            let m = nm.minimize(s, &bounds, &objective);
            if m.f.is_finite() && best.as_ref().map_or(true, |b| m.f < b.1) {
                best = Some((m.x, m.f));
            }
        }
        match best {
            Some((th, f)) if f <= init_nll => GpModel::new(inputs, targets, from_theta(&th)),
            Some(_) => init_model,
            None => {
                log::warn!("GP hyperparameter search failed at every start; keeping init");
                let mut m = init_model?;
                m.fit_warning = true;
                Ok(m)
            }
        }
    }
}

/// `√2·erf⁻¹(p)`: half-width of the tuning box that gives two-sided
/// Gaussian coverage `p`.
pub fn chance_halfwidth(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return usage(format!("confidence level {p} outside [0, 1)"));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    Ok(std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(p))
}

/// How wide the uncertainty band is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// Two-sided coverage probability `p`; half-width `√2·erf⁻¹(p)`.
    Probability(f64),
    /// Direct multiple of the posterior standard deviation.
    SigmaMultiplier(f64),
}

impl Band {
    pub fn halfwidth(&self) -> Result<f64> {
        match *self {
            Band::Probability(p) => chance_halfwidth(p),
            Band::SigmaMultiplier(k) if k >= 0.0 && k.is_finite() => Ok(k),
            Band::SigmaMultiplier(k) => usage(format!("sigma multiplier {k} must be >= 0")),
        }
    }
}

/// Anything that bounds the residual dynamics at a state by a per-component
/// interval `center ± radius`.
pub trait DisturbanceBand: Send + Sync {
    fn n_components(&self) -> usize;
    /// `(center, radius)` per state-derivative component at tracking state `s`.
    fn band(&self, s: &[f64]) -> Result<Vec<(f64, f64)>>;
    /// Indices of the tracking-state entries the band reads.
    fn input_axes(&self) -> Vec<usize>;
}

/// Per-component GPs over a subset of the tracking state.
#[derive(Debug, Clone)]
pub struct UncertaintyModel {
    /// One entry per state-derivative component; `None` means unmodeled.
    pub components: Vec<Option<GpModel>>,
    /// Which tracking-state entries feed the GPs, in GP input order.
    pub active_axes: Vec<usize>,
    pub band: Band,
    /// Known bounded white noise added to each component's radius.
    pub noise_bound: Vec<f64>,
    /// Optional per-component hull the band is intersected with.
    pub clip: Option<Vec<(f64, f64)>>,
}

impl UncertaintyModel {
    pub fn new(components: Vec<Option<GpModel>>, active_axes: Vec<usize>, band: Band) -> Result<Self> {
        band.halfwidth()?;
        for g in components.iter().flatten() {
            if g.input_dim() != active_axes.len() {
                return usage(format!(
                    "GP has {} inputs but {} active axes are configured",
                    g.input_dim(),
                    active_axes.len()
                ));
            }
        }
        let n = components.len();
        Ok(Self { components, active_axes, band, noise_bound: vec![0.0; n], clip: None })
    }

    /// The model that says "no uncertainty anywhere" for `n` components.
    pub fn zero(n: usize) -> Self {
        Self {
            components: vec![None; n],
            active_axes: Vec::new(),
            band: Band::SigmaMultiplier(0.0),
            noise_bound: vec![0.0; n],
            clip: None,
        }
    }

    pub fn halfwidth(&self) -> f64 {
        self.band.halfwidth().unwrap_or(0.0)
    }

    fn gp_input(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.active_axes
            .iter()
            .map(|&a| {
                s.get(a).copied().ok_or_else(|| {
                    Error::Usage(format!("state of dim {} lacks active axis {a}", s.len()))
                })
            })
            .collect()
    }

    /// `(mean, std)` per component; unmodeled components give `(0, 0)`.
    pub fn moments(&self, s: &[f64]) -> Result<Vec<(f64, f64)>> {
        let x = self.gp_input(s)?;
        self.components
            .iter()
            .map(|c| match c {
                Some(gp) => gp.posterior(&x),
                None => Ok((0.0, 0.0)),
            })
            .collect()
    }

    /// `mean_j + e_j·std_j` per component, with `e` checked against the box.
    pub fn evaluate(&self, s: &[f64], e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.components.len() {
            return usage(format!(
                "tuning vector has {} entries for {} components",
                e.len(),
                self.components.len()
            ));
        }
        let hw = self.band.halfwidth()?;
        if let Some(v) = e.iter().find(|v| v.abs() > hw + 1e-12) {
            return usage(format!("tuning value {v} outside the box |e| <= {hw}"));
        }
        Ok(self.moments(s)?.iter().zip(e).map(|((m, sd), ej)| m + ej * sd).collect())
    }
}

impl DisturbanceBand for UncertaintyModel {
    fn n_components(&self) -> usize {
        self.components.len()
    }

    fn band(&self, s: &[f64]) -> Result<Vec<(f64, f64)>> {
        let hw = self.band.halfwidth()?;
        let moments = self.moments(s)?;
        Ok(moments
            .iter()
            .enumerate()
            .map(|(j, &(m, sd))| {
                let r = hw * sd + self.noise_bound.get(j).copied().unwrap_or(0.0);
                let (mut lo, mut hi) = (m - r, m + r);
                if let Some((clo, chi)) = self.clip.as_ref().and_then(|c| c.get(j)).copied() {
                    lo = lo.clamp(clo, chi);
                    hi = hi.clamp(clo, chi);
                }
                (0.5 * (lo + hi), 0.5 * (hi - lo))
            })
            .collect())
    }

    fn input_axes(&self) -> Vec<usize> {
        self.active_axes.clone()
    }
}

/// The worst-case baseline: a constant box per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantBox {
    pub bounds: Vec<(f64, f64)>,
}

impl ConstantBox {
    /// `[min, max]` of the observed residuals per component; components
    /// without observations get a zero box.
    pub fn from_observations(per_component: &[Vec<Observation>]) -> Self {
        let bounds = per_component
            .iter()
            .map(|obs| {
                if obs.is_empty() {
                    (0.0, 0.0)
                } else {
                    obs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
                        (lo.min(o.target), hi.max(o.target))
                    })
                }
            })
            .collect();
        Self { bounds }
    }
}

impl DisturbanceBand for ConstantBox {
    fn n_components(&self) -> usize {
        self.bounds.len()
    }

    fn band(&self, _s: &[f64]) -> Result<Vec<(f64, f64)>> {
        Ok(self.bounds.iter().map(|&(lo, hi)| (0.5 * (lo + hi), 0.5 * (hi - lo))).collect())
    }

    fn input_axes(&self) -> Vec<usize> {
        Vec::new()
    }
}

/// On-disk form of a [`GpModel`]; the factorization is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpDocument {
    pub params: KernelParams,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    #[serde(default)]
    pub fit_warning: bool,
}

impl From<&GpModel> for GpDocument {
    fn from(m: &GpModel) -> Self {
        Self {
            params: m.params.clone(),
            inputs: m.inputs.clone(),
            targets: m.targets.clone(),
            fit_warning: m.fit_warning,
        }
    }
}

impl TryFrom<GpDocument> for GpModel {
    type Error = Error;
    fn try_from(d: GpDocument) -> Result<Self> {
        let mut m = GpModel::new(d.inputs, d.targets, d.params)?;
        m.fit_warning = d.fit_warning;
        Ok(m)
    }
}

/// On-disk form of an [`UncertaintyModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDocument {
    pub components: Vec<Option<GpDocument>>,
    pub active_axes: Vec<usize>,
    pub band: Band,
    pub noise_bound: Vec<f64>,
    pub clip: Option<Vec<(f64, f64)>>,
}

impl From<&UncertaintyModel> for UncertaintyDocument {
    fn from(u: &UncertaintyModel) -> Self {
        Self {
            components: u.components.iter().map(|c| c.as_ref().map(GpDocument::from)).collect(),
            active_axes: u.active_axes.clone(),
            band: u.band,
            noise_bound: u.noise_bound.clone(),
            clip: u.clip.clone(),
        }
    }
}

impl TryFrom<UncertaintyDocument> for UncertaintyModel {
    type Error = Error;
    fn try_from(d: UncertaintyDocument) -> Result<Self> {
        let components = d
            .components
            .into_iter()
            .map(|c| c.map(GpModel::try_from).transpose())
            .collect::<Result<Vec<_>>>()?;
        let mut u = UncertaintyModel::new(components, d.active_axes, d.band)?;
        if d.noise_bound.len() != u.components.len() {
            return usage("noise_bound length must match component count");
        }
        u.noise_bound = d.noise_bound;
        u.clip = d.clip;
        Ok(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> KernelParams {
        KernelParams::new(1.0, vec![1.0], 0.0, 0.0)
    }

    #[test]
    fn kernel_examples() {
        let p = KernelParams::new(2.5, vec![0.7, 1.3], 0.1, 0.0);
        assert_eq!(kernel(&[0.3, -1.0], &[0.3, -1.0], &p).unwrap(), 2.5);
        assert!(kernel(&[0.0, 0.0], &[1e3, 1e3], &p).unwrap() < 1e-300);
        assert!((kernel(&[0.0], &[1.0], &unit()).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((kernel(&[0.0], &[1.0], &unit()).unwrap() - 0.60653).abs() < 1e-5);
        assert!(matches!(kernel(&[0.0], &[1.0, 2.0], &unit()), Err(Error::Usage(_))));
    }

    #[test]
    fn lml_scalar_gaussian() {
        let p = KernelParams::new(0.64, vec![1.0], 0.6, 0.0);
        let m = GpModel::new(vec![vec![0.0]], vec![0.0], p).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((m.log_marginal_likelihood() - expect).abs() < 1e-12);
        assert!((m.log_marginal_likelihood() + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn lml_two_points_matches_dense() {
        let p = KernelParams::new(1.3, vec![0.8], 0.2, 0.1);
        let xs = [[0.1], [0.9]];
        let ys = [0.5, -0.2];
        let m = GpModel::new(xs.iter().map(|x| x.to_vec()).collect(), ys.to_vec(), p.clone())
            .unwrap();
        let k01 = 1.3 * (-0.5 * (0.8f64 / 0.8).powi(2)).exp();
        let a = 1.3 + 0.04;
        let det = a * a - k01 * k01;
        let r = [ys[0] - 0.1, ys[1] - 0.1];
        // inverse of [[a,k],[k,a]]
        let quad = (a * r[0] * r[0] - 2.0 * k01 * r[0] * r[1] + a * r[1] * r[1]) / det;
        let expect = -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((m.log_marginal_likelihood() - expect).abs() < 1e-10);
    }

    #[test]
    fn empty_model_is_prior() {
        let p = KernelParams::new(2.0, vec![1.0, 1.0], 0.1, -0.3);
        let m = GpModel::prior(p).unwrap();
        let (mu, sd) = m.posterior(&[5.0, -2.0]).unwrap();
        assert_eq!(mu, -0.3);
        assert!((sd - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn noiseless_interpolation() {
        let xs: Vec<Vec<f64>> = vec![vec![-1.0], vec![0.0], vec![1.5]];
        let ys = vec![0.3, -0.7, 1.1];
        let m = GpModel::new(xs.clone(), ys.clone(), unit()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (mu, sd) = m.posterior(x).unwrap();
            assert!((mu - y).abs() < 1e-8, "{mu} vs {y}");
            assert!(sd < 1e-6, "{sd}");
        }
    }

    #[test]
    fn fit_errors_on_empty() {
        assert!(matches!(GpModel::fit(&[], &unit()), Err(Error::Usage(_))));
    }

    #[test]
    fn fit_constant_data_drives_noise_down() {
        let obs: Vec<Observation> = (0..8)
            .map(|i| Observation { input: vec![i as f64 * 0.5], target: 0.4 })
            .collect();
        let init = KernelParams::new(1.0, vec![1.0], 0.3, 0.0);
        let m = GpModel::fit(&obs, &init).unwrap();
        assert!(m.params().noise_std < 1e-3, "{:?}", m.params());
        let (mu, _) = m.posterior(&[1.25]).unwrap();
        assert!((mu - 0.4).abs() < 1e-3);
    }

    #[test]
    fn chance_halfwidth_examples() {
        assert_eq!(chance_halfwidth(0.0).unwrap(), 0.0);
        assert!((chance_halfwidth(0.6827).unwrap() - 1.0).abs() < 1e-3);
        assert!((chance_halfwidth(0.9545).unwrap() - 2.0).abs() < 1e-3);
        assert!(chance_halfwidth(1.0).is_err());
        assert!(chance_halfwidth(-0.1).is_err());
    }

    #[test]
    fn evaluate_is_affine_in_e() {
        let gp = GpModel::new(vec![vec![0.0, 0.0], vec![0.5, 0.2]], vec![0.1, -0.4],
            KernelParams::new(0.5, vec![0.7, 0.7], 0.05, 0.0)).unwrap();
        let u = UncertaintyModel::new(vec![Some(gp), None], vec![1, 2], Band::Probability(0.9545))
            .unwrap();
        let s = [9.0, 0.25, 0.1];
        let m = u.moments(&s).unwrap();
        let base = u.evaluate(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(base[0], m[0].0);
        assert_eq!(base[1], 0.0);
        let hw = u.halfwidth();
        let top = u.evaluate(&s, &[hw, hw]).unwrap();
        assert!((top[0] - (m[0].0 + hw * m[0].1)).abs() < 1e-14);
        assert!(u.evaluate(&s, &[hw * 1.01, 0.0]).is_err());
    }

    #[test]
    fn clip_keeps_band_inside_hull() {
        let gp = GpModel::prior(KernelParams::new(1.0, vec![1.0], 0.0, 0.5)).unwrap();
        let mut u = UncertaintyModel::new(vec![Some(gp)], vec![0], Band::SigmaMultiplier(1.0))
            .unwrap();
        u.clip = Some(vec![(-0.2, 0.3)]);
        let (c, r) = u.band(&[0.0]).unwrap()[0];
        assert!((c - r - (-0.2)).abs() < 1e-15 && (c + r - 0.3).abs() < 1e-15);
    }

    #[test]
    fn document_round_trip_refactors() {
        let gp = GpModel::new(vec![vec![0.0], vec![1.0]], vec![0.2, 0.5],
            KernelParams::new(1.0, vec![0.9], 0.1, 0.0)).unwrap();
        let u = UncertaintyModel::new(vec![Some(gp), None], vec![1], Band::Probability(0.68))
            .unwrap();
        let doc = UncertaintyDocument::from(&u);
        let text = serde_json::to_string(&doc).unwrap();
        let back = UncertaintyModel::try_from(serde_json::from_str::<UncertaintyDocument>(&text).unwrap())
            .unwrap();
        let a = u.moments(&[0.0, 0.4]).unwrap();
        let b = back.moments(&[0.0, 0.4]).unwrap();
        assert_eq!(a, b);
    }
}
