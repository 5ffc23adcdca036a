//! Continuous-time models: the nominal vessel (5-D thruster model or the
//! 3-D desk-scale unicycle), the single-integrator planner, the relative
//! tracker-minus-planner system, the truth simulator and fixed-step
//! integrators.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::gp::{DisturbanceBand, UncertaintyModel};

/// Largest relative-state dimension any model produces.
pub const MAX_DIM: usize = 6;
/// Largest tracker or planner input dimension.
pub const MAX_INPUTS: usize = 2;
/// Largest number of disturbance components.
pub const MAX_CHANNELS: usize = 5;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut t = (a + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// Identified Heron parameters. Defaults are the published identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeronParams {
    pub mass_kg: f64,
    pub inertia_kg_m2: f64,
    pub length_m: f64,
    pub max_thrust_n: f64,
    pub lin_damp_v: f64,
    pub lin_damp_w: f64,
    pub quad_damp_v: f64,
    pub quad_damp_w: f64,
}

impl Default for HeronParams {
    fn default() -> Self {
        Self {
            mass_kg: 36.0,
            inertia_kg_m2: 8.35,
            length_m: 0.7366,
            max_thrust_n: 45.0,
            lin_damp_v: 0.0,
            lin_damp_w: 0.0,
            quad_damp_v: 16.9,
            quad_damp_w: 13.0,
        }
    }
}

impl HeronParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.mass_kg, self.inertia_kg_m2, self.length_m, self.max_thrust_n];
        let nonneg = [self.lin_damp_v, self.lin_damp_w, self.quad_damp_v, self.quad_damp_w];
        if pos.iter().all(|v| *v > 0.0 && v.is_finite()) && nonneg.iter().all(|v| *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Validation {
                field: "heron".into(),
                message: "mass, inertia, length, thrust must be > 0 and damping >= 0".into(),
            })
        }
    }
}

/// Nominal Heron model. State `(x, y, ψ, v, ω)`, input thruster commands `(n₁, n₂)`.
pub fn nominal_heron(s: &[f64; 5], u: [f64; 2], p: &HeronParams) -> [f64; 5] {
    let [_, _, psi, v, w] = *s;
    let [n1, n2] = u;
    [
        v * psi.cos(),
        v * psi.sin(),
        w,
        ((n1 + n2) * p.max_thrust_n - (p.lin_damp_v + p.quad_damp_v * v.abs()) * v) / p.mass_kg,
        ((n1 - n2) * 0.5 * p.length_m * p.max_thrust_n - (p.lin_damp_w + p.quad_damp_w * w.abs()) * w)
            / p.inertia_kg_m2,
    ]
}

/// Kinematic unicycle. State `(x, y, ψ)`, input `(v, ω)`.
pub fn nominal_unicycle(s: &[f64; 3], u: [f64; 2]) -> [f64; 3] {
    let [v, w] = u;
    [v * s[2].cos(), v * s[2].sin(), w]
}

/// Single-integrator planner: `ṗ = u_p`.
pub fn planning_model(u_p: [f64; 2]) -> [f64; 2] {
    u_p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackerModel {
    Unicycle,
    Heron(HeronParams),
}

impl TrackerModel {
    pub fn state_dim(&self) -> usize {
        match self {
            TrackerModel::Unicycle => 3,
            TrackerModel::Heron(_) => 5,
        }
    }

    pub fn nominal(&self, s: &[f64], u: [f64; 2]) -> Vec<f64> {
        match self {
            TrackerModel::Unicycle => nominal_unicycle(&[s[0], s[1], s[2]], u).to_vec(),
            TrackerModel::Heron(p) => nominal_heron(&[s[0], s[1], s[2], s[3], s[4]], u, p).to_vec(),
        }
    }
}

/// Axis-aligned box of admissible inputs, one `(lo, hi)` per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox(pub Vec<(f64, f64)>);

impl InputBox {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.0.len()
            && u.iter().zip(&self.0).all(|(x, (lo, hi))| *x >= lo - 1e-12 && *x <= hi + 1e-12)
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for (x, (lo, hi)) in u.iter_mut().zip(&self.0) {
            *x = x.clamp(*lo, *hi);
        }
    }

    /// `per_axis` evenly spaced values on every axis, endpoints included.
    pub fn lattice(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let per_axis = per_axis.max(2);
        let mut out = vec![Vec::new()];
        for &(lo, hi) in &self.0 {
            let mut next = Vec::with_capacity(out.len() * per_axis);
            for prefix in &out {
                for i in 0..per_axis {
                    let t = i as f64 / (per_axis - 1) as f64;
                    let mut p = prefix.clone();
                    p.push(if i + 1 == per_axis { hi } else { lo + t * (hi - lo) });
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        for (i, (lo, hi)) in self.0.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Validation {
                    field: format!("{field}[{i}]"),
                    message: format!("bounds ({lo}, {hi}) must be finite with lo <= hi"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelativeMode {
    /// `r = (x_r, y_r, ψ, y)` over the unicycle.
    Unicycle4d,
    /// `r = (x_r, y_r, ψ, v, ω, y)` over the Heron thruster model.
    Heron6d,
}

impl RelativeMode {
    pub fn dim(self) -> usize {
        match self {
            RelativeMode::Unicycle4d => 4,
            RelativeMode::Heron6d => 6,
        }
    }

    /// Index of the appended global-`y` row.
    pub fn y_axis(self) -> usize {
        self.dim() - 1
    }

    pub fn heading_axis(self) -> usize {
        2
    }

    pub fn axis_names(self) -> &'static [&'static str] {
        match self {
            RelativeMode::Unicycle4d => &["x_r", "y_r", "psi", "y"],
            RelativeMode::Heron6d => &["x_r", "y_r", "psi", "v", "omega", "y"],
        }
    }
}

/// Per-node affine decomposition of the relative dynamics:
/// `g = drift + Σ_k tracker[k]·u_s,k + Σ_k planner[k]·u_p,k + Σ_j dir_j·(center_j + δ_j)`
/// with `|δ_j| ≤ radius_j`.
#[derive(Debug, Clone, Copy)]
pub struct AffineTerms {
    pub dim: usize,
    pub drift: [f64; MAX_DIM],
    pub tracker: [[f64; MAX_DIM]; MAX_INPUTS],
    pub planner: [[f64; MAX_DIM]; MAX_INPUTS],
    pub channels: [Channel; MAX_CHANNELS],
    pub n_channels: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Channel {
    pub dir: [f64; MAX_DIM],
    pub center: f64,
    pub radius: f64,
    /// Range used when bounding `|g|` for numerical dissipation; contains
    /// `center ± radius`.
    pub envelope: (f64, f64),
}

impl AffineTerms {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            drift: [0.0; MAX_DIM],
            tracker: [[0.0; MAX_DIM]; MAX_INPUTS],
            planner: [[0.0; MAX_DIM]; MAX_INPUTS],
            channels: [Channel::default(); MAX_CHANNELS],
            n_channels: 0,
        }
    }

    /// Evaluates `g` for explicit inputs and per-channel offsets `δ`.
    pub fn eval(&self, us: &[f64], up: &[f64], delta: &[f64]) -> [f64; MAX_DIM] {
        let mut g = self.drift;
        for (k, u) in us.iter().enumerate() {
            for i in 0..self.dim {
                g[i] += self.tracker[k][i] * u;
            }
        }
        for (k, u) in up.iter().enumerate() {
            for i in 0..self.dim {
                g[i] += self.planner[k][i] * u;
            }
        }
        for (c, d) in self.channels[..self.n_channels].iter().zip(delta) {
            for i in 0..self.dim {
                g[i] += c.dir[i] * (c.center + d);
            }
        }
        g
    }
}

/// A two-player-plus-disturbance game whose dynamics are affine in every
/// input. This is what the HJ solver consumes.
pub trait AffineGame: Sync {
    fn dim(&self) -> usize;
    fn tracker_box(&self) -> &InputBox;
    fn planner_box(&self) -> &InputBox;
    /// Relative-state axes the affine terms depend on.
    fn dependent_axes(&self) -> Vec<usize>;
    fn terms(&self, r: &[f64]) -> Result<AffineTerms>;
    /// Cost whose running maximum the value function tracks.
    fn stage_cost(&self, r: &[f64]) -> f64 {
        stage_cost(r)
    }
}

/// Euclidean norm of the position components (the first two, or fewer).
pub fn stage_cost(r: &[f64]) -> f64 {
    r.iter().take(2).map(|v| v * v).sum::<f64>().sqrt()
}

/// Tracker-minus-planner system `r = Q_s s − Q_p p` with its dynamics
/// `ṙ = Q_s (f₀(s, u_s) + d̃(s, e)) − Q_p u_p`.
#[derive(Clone)]
pub struct RelativeSystem {
    pub mode: RelativeMode,
    pub tracker: TrackerModel,
    /// `dim × state_dim` selection/augmentation map.
    pub q_s: Vec<Vec<f64>>,
    /// `dim × 2` planner matching map.
    pub q_p: Vec<Vec<f64>>,
    /// Appended tracking states (beyond errors and carried states).
    pub n_add: usize,
    pub tracker_box: InputBox,
    pub planner_box: InputBox,
    pub disturbance: Arc<dyn DisturbanceBand>,
    /// Present when `disturbance` is a GP band; enables the `e`-parametrized API.
    pub uncertainty: Option<Arc<UncertaintyModel>>,
    /// Band whose range bounds `|g|` for dissipation; defaults to `disturbance`.
    pub envelope: Option<Arc<dyn DisturbanceBand>>,
}

impl std::fmt::Debug for RelativeSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RelativeSystem")
            .field("mode", &self.mode)
            .field("tracker", &self.tracker)
            .field("tracker_box", &self.tracker_box)
            .field("planner_box", &self.planner_box)
            .finish_non_exhaustive()
    }
}

impl RelativeSystem {
    pub fn new(
        mode: RelativeMode,
        tracker: TrackerModel,
        tracker_box: InputBox,
        planner_box: InputBox,
        disturbance: Arc<dyn DisturbanceBand>,
    ) -> Result<Self> {
        let n_s = tracker.state_dim();
        match (mode, &tracker) {
            (RelativeMode::Unicycle4d, TrackerModel::Unicycle) => {}
            (RelativeMode::Heron6d, TrackerModel::Heron(p)) => p.validate()?,
            _ => return usage(format!("mode {mode:?} does not match tracker {tracker:?}")),
        }
        tracker_box.validate("tracker_box")?;
        planner_box.validate("planner_box")?;
        if tracker_box.dim() != 2 || planner_box.dim() != 2 {
            return usage("tracker and planner boxes must both be 2-D");
        }
        if disturbance.n_components() != n_s {
            return usage(format!(
                "disturbance has {} components, tracker state has {n_s}",
                disturbance.n_components()
            ));
        }
        if disturbance.input_axes().iter().any(|&a| a == 0 || a >= n_s) {
            return Err(Error::Validation {
                field: "gp.active_axes".into(),
                message: "uncertainty may read y and the carried states, not x".into(),
            });
        }
        let dim = mode.dim();
        let mut q_s = vec![vec![0.0; n_s]; dim];
        let mut q_p = vec![vec![0.0; 2]; dim];
        // errors, then carried states, then the appended global y
        for i in 0..n_s {
            q_s[i][i] = 1.0;
        }
        q_p[0][0] = 1.0;
        q_p[1][1] = 1.0;
        q_s[dim - 1][1] = 1.0;
        Ok(Self {
            mode,
            tracker,
            q_s,
            q_p,
            n_add: dim - n_s,
            tracker_box,
            planner_box,
            disturbance,
            uncertainty: None,
            envelope: None,
        })
    }

    /// Builds the system around a GP uncertainty model.
    pub fn with_uncertainty(
        mode: RelativeMode,
        tracker: TrackerModel,
        tracker_box: InputBox,
        planner_box: InputBox,
        uncertainty: Arc<UncertaintyModel>,
    ) -> Result<Self> {
        let mut sys = Self::new(mode, tracker, tracker_box, planner_box, uncertainty.clone())?;
        sys.uncertainty = Some(uncertainty);
        Ok(sys)
    }

    pub fn dim(&self) -> usize {
        self.mode.dim()
    }

    pub fn state_dim(&self) -> usize {
        self.tracker.state_dim()
    }

    /// `r = Q_s s − Q_p p`, with the heading row wrapped.
    pub fn relative_state(&self, s: &[f64], p: [f64; 2]) -> Result<Vec<f64>> {
        if s.len() != self.state_dim() {
            return usage(format!(
                "tracking state has {} entries, mode {:?} needs {}",
                s.len(),
                self.mode,
                self.state_dim()
            ));
        }
        let mut r: Vec<f64> = self
            .q_s
            .iter()
            .zip(&self.q_p)
            .map(|(qs, qp)| {
                qs.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() - qp[0] * p[0] - qp[1] * p[1]
            })
            .collect();
        let h = self.mode.heading_axis();
        r[h] = wrap_angle(r[h]);
        Ok(r)
    }

    /// Tracking state consistent with `r`. `x` is not recoverable from `r`
    /// and is set to zero; no model here depends on it.
    pub fn tracker_state(&self, r: &[f64]) -> Vec<f64> {
        let n_s = self.state_dim();
        let mut s = vec![0.0; n_s];
        for (row, (qs, qp)) in self.q_s.iter().zip(&self.q_p).enumerate() {
            if qp.iter().all(|v| *v == 0.0) {
                if let Some(j) = qs.iter().position(|v| *v == 1.0) {
                    if qs.iter().filter(|v| **v != 0.0).count() == 1 {
                        s[j] = r[row];
                    }
                }
            }
        }
        s
    }

    /// `ṙ` for an explicit disturbance value per component.
    pub fn dynamics_with_disturbance(
        &self,
        r: &[f64],
        u_s: [f64; 2],
        u_p: [f64; 2],
        d: &[f64],
    ) -> Result<Vec<f64>> {
        if r.len() != self.dim() {
            return usage(format!("relative state has {} entries, expected {}", r.len(), self.dim()));
        }
        let s = self.tracker_state(r);
        let f0 = self.tracker.nominal(&s, u_s);
        let h = planning_model(u_p);
        Ok(self
            .q_s
            .iter()
            .zip(&self.q_p)
            .map(|(qs, qp)| {
                let tracked: f64 = qs.iter().enumerate().map(|(j, q)| q * (f0[j] + d[j])).sum();
                tracked - qp[0] * h[0] - qp[1] * h[1]
            })
            .collect())
    }

    /// `ṙ = g(r, u_s, u_p, e)` with the GP band `d̄ʲ + eʲσʲ`.
    pub fn relative_dynamics(&self, r: &[f64], u_s: [f64; 2], u_p: [f64; 2], e: &[f64]) -> Result<Vec<f64>> {
        let Some(u) = &self.uncertainty else {
            return usage("relative_dynamics with a tuning vector needs a GP uncertainty model");
        };
        let d = u.evaluate(&self.tracker_state(r), e)?;
        self.dynamics_with_disturbance(r, u_s, u_p, &d)
    }

    /// Reads the planner-matching rows back out of `r`: `(x − x_p, y − y_p)`.
    pub fn position_error(&self, r: &[f64]) -> [f64; 2] {
        [r[0], r[1]]
    }
}

impl AffineGame for RelativeSystem {
    fn dim(&self) -> usize {
        self.mode.dim()
    }

    fn tracker_box(&self) -> &InputBox {
        &self.tracker_box
    }

    fn planner_box(&self) -> &InputBox {
        &self.planner_box
    }

    fn dependent_axes(&self) -> Vec<usize> {
        (2..self.dim()).collect()
    }

    fn terms(&self, r: &[f64]) -> Result<AffineTerms> {
        let dim = self.dim();
        let s = self.tracker_state(r);
        let n_s = s.len();
        let f_zero = self.tracker.nominal(&s, [0.0, 0.0]);
        let mut t = AffineTerms::zeros(dim);
        let apply = |v: &[f64], out: &mut [f64; MAX_DIM]| {
            for (i, row) in self.q_s.iter().enumerate() {
                out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
            }
        };
        apply(&f_zero, &mut t.drift);
        for k in 0..2 {
            let mut unit = [0.0; 2];
            unit[k] = 1.0;
            let f_k = self.tracker.nominal(&s, unit);
            let col: Vec<f64> = f_k.iter().zip(&f_zero).map(|(a, b)| a - b).collect();
            apply(&col, &mut t.tracker[k]);
            for i in 0..dim {
                t.planner[k][i] = -self.q_p[i][k];
            }
        }
        let band = self.disturbance.band(&s)?;
        let env = match &self.envelope {
            Some(e) => Some(e.band(&s)?),
            None => None,
        };
        t.n_channels = n_s;
        for j in 0..n_s {
            let (c, rad) = band[j];
            let ch = &mut t.channels[j];
            for i in 0..dim {
                ch.dir[i] = self.q_s[i][j];
            }
            ch.center = c;
            ch.radius = rad;
            ch.envelope = match &env {
                Some(env) => {
                    let (ec, er) = env[j];
                    ((ec - er).min(c - rad), (ec + er).max(c + rad))
                }
                None => (c - rad, c + rad),
            };
        }
        Ok(t)
    }
}

/// The handcrafted state-dependent disturbance on `ẋ`:
/// `0.5(y² − 1)(1 + |sin ψ|)`.
pub fn handcrafted_disturbance(y: f64, psi: f64) -> f64 {
    0.5 * (y * y - 1.0) * (1.0 + psi.sin().abs())
}

/// Simulation ground truth for the unicycle: nominal kinematics plus the
/// handcrafted disturbance on `ẋ` and bounded uniform noise on `ẏ`, `ψ̇`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthModel {
    pub disturbance: bool,
    pub noise_amplitude: f64,
}

impl Default for TruthModel {
    fn default() -> Self {
        Self { disturbance: true, noise_amplitude: 0.02 }
    }
}

impl TruthModel {
    pub fn sample_noise(&self, rng: &mut impl Rng) -> [f64; 2] {
        if self.noise_amplitude == 0.0 {
            return [0.0, 0.0];
        }
        let a = self.noise_amplitude;
        [rng.gen_range(-a..=a), rng.gen_range(-a..=a)]
    }

    /// True state derivative for a held noise sample.
    pub fn derivative(&self, s: &[f64; 3], u: [f64; 2], noise: [f64; 2]) -> [f64; 3] {
        debug_assert!(noise.iter().all(|n| n.abs() <= self.noise_amplitude));
        let mut ds = nominal_unicycle(s, u);
        if self.disturbance {
            ds[0] += handcrafted_disturbance(s[1], s[2]);
        }
        ds[1] += noise[0];
        ds[2] += noise[1];
        ds
    }

    /// Residual `truth − nominal` per component.
    pub fn residual(&self, s: &[f64; 3], noise: [f64; 2]) -> [f64; 3] {
        let d = if self.disturbance { handcrafted_disturbance(s[1], s[2]) } else { 0.0 };
        [d, noise[0], noise[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// One fixed step of `ṡ = f(s)` (inputs held). `angle_index`, when given,
/// names the row renormalized into `(−π, π]` afterwards.
pub fn integrate(
    f: impl Fn(&[f64]) -> Vec<f64>,
    s: &[f64],
    dt: f64,
    scheme: Scheme,
    angle_index: Option<usize>,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return usage(format!("step {dt} must be positive"));
    }
    let axpy = |a: &[f64], k: &[f64], h: f64| -> Vec<f64> { a.iter().zip(k).map(|(x, d)| x + h * d).collect() };
    let mut next = match scheme {
        Scheme::Euler => axpy(s, &f(s), dt),
        Scheme::Rk4 => {
            let k1 = f(s);
            let k2 = f(&axpy(s, &k1, 0.5 * dt));
            let k3 = f(&axpy(s, &k2, 0.5 * dt));
            let k4 = f(&axpy(s, &k3, dt));
            s.iter()
                .enumerate()
                .map(|(i, x)| x + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("integration produced a non-finite state".into()));
    }
    if let Some(a) = angle_index {
        next[a] = wrap_angle(next[a]);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{Band, ConstantBox, GpModel, KernelParams};

    fn unicycle_system(dist: Arc<dyn DisturbanceBand>) -> RelativeSystem {
        RelativeSystem::new(
            RelativeMode::Unicycle4d,
            TrackerModel::Unicycle,
            InputBox(vec![(-1.0, 1.0), (-1.0, 1.0)]),
            InputBox(vec![(-0.1, 0.1), (-0.1, 0.1)]),
            dist,
        )
        .unwrap()
    }

    fn heron_system() -> RelativeSystem {
        RelativeSystem::with_uncertainty(
            RelativeMode::Heron6d,
            TrackerModel::Heron(HeronParams::default()),
            InputBox(vec![(-1.0, 1.0), (-1.0, 1.0)]),
            InputBox(vec![(-0.25, 0.25), (-0.25, 0.25)]),
            Arc::new(UncertaintyModel::zero(5)),
        )
        .unwrap()
    }

    #[test]
    fn heron_examples() {
        let p = HeronParams::default();
        assert_eq!(nominal_heron(&[0.0; 5], [0.0, 0.0], &p), [0.0; 5]);
        let d = nominal_heron(&[0.0, 0.0, 0.0, 1.0, 0.0], [0.5, 0.5], &p);
        assert!((d[3] - (45.0 - 16.9) / 36.0).abs() < 1e-12);
        assert!((d[3] - 0.7806).abs() < 1e-4);
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] == 0.0 && d[2] == 0.0 && d[4] == 0.0);
        let d = nominal_heron(&[0.0; 5], [0.5, -0.5], &p);
        assert!((d[4] - 0.3683 * 45.0 / 8.35).abs() < 1e-12);
        // 0.3683·45/8.35 = 1.98485…
        assert!((d[4] - 1.9848).abs() < 1e-4);
        assert_eq!([d[0], d[1], d[2], d[3]], [0.0; 4]);
    }

    #[test]
    fn planning_examples() {
        assert_eq!(planning_model([0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(planning_model([0.2, -0.1]), [0.2, -0.1]);
        let p = integrate(|_| planning_model([1.0, 0.0]).to_vec(), &[0.0, 0.0], 0.1, Scheme::Euler, None)
            .unwrap();
        assert_eq!(p, vec![0.1, 0.0]);
    }

    #[test]
    fn relative_state_examples() {
        let sys = unicycle_system(Arc::new(ConstantBox { bounds: vec![(0.0, 0.0); 3] }));
        let r = sys.relative_state(&[1.0, 0.4, 0.7], [1.0, 0.4]).unwrap();
        assert_eq!(r, vec![0.0, 0.0, 0.7, 0.4]);
        let h = heron_system();
        let r = h.relative_state(&[1.0, 2.0, 0.3, 0.4, 0.1], [0.5, 1.5]).unwrap();
        assert_eq!(r, vec![0.5, 0.5, 0.3, 0.4, 0.1, 2.0]);
        assert_eq!(h.n_add, 1);
    }

    #[test]
    fn relative_state_reconstructs_position_error() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = heron_system();
        for _ in 0..200 {
            let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let r = h.relative_state(&s, p).unwrap();
            assert!((r[0] - (s[0] - p[0])).abs() < 1e-15);
            assert!((r[1] - (s[1] - p[1])).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_uncertainty_reduces_to_nominal() {
        let h = heron_system();
        let r = [0.3, -0.2, 0.8, 0.35, -0.2, 0.1];
        let u = [0.3, -0.6];
        let g = h.relative_dynamics(&r, u, [0.0, 0.0], &[0.0; 5]).unwrap();
        let s = [0.0, 0.1, 0.8, 0.35, -0.2];
        let f = nominal_heron(&s, u, &HeronParams::default());
        for i in 0..5 {
            assert_eq!(g[i], f[i]);
        }
        assert_eq!(g[5], f[1]);
    }

    #[test]
    fn affine_terms_match_direct_evaluation() {
        let gp = GpModel::new(
            vec![vec![0.0, 0.0], vec![0.5, 0.5], vec![-0.4, 0.2]],
            vec![-0.5, -0.3, -0.4],
            KernelParams::new(0.2, vec![0.6, 0.6], 0.01, -0.2),
        )
        .unwrap();
        let u = Arc::new(
            UncertaintyModel::new(vec![Some(gp), None, None], vec![1, 2], Band::SigmaMultiplier(1.0))
                .unwrap(),
        );
        let sys = RelativeSystem::with_uncertainty(
            RelativeMode::Unicycle4d,
            TrackerModel::Unicycle,
            InputBox(vec![(-1.0, 1.0), (-1.0, 1.0)]),
            InputBox(vec![(-0.1, 0.1), (-0.1, 0.1)]),
            u,
        )
        .unwrap();
        let r = [0.1, -0.05, 0.4, 0.3];
        let t = sys.terms(&r).unwrap();
        for (us, up, e) in [([0.4, -0.3], [0.05, -0.1], [0.7, 0.0, 0.0]), ([-1.0, 1.0], [0.1, 0.1], [-1.0, 0.0, 0.0])] {
            let direct = sys.relative_dynamics(&r, us, up, &e).unwrap();
            let delta: Vec<f64> = (0..3).map(|j| e[j] * t.channels[j].radius).collect();
            let via = t.eval(&us, &up, &delta);
            for i in 0..4 {
                assert!((direct[i] - via[i]).abs() < 1e-12, "row {i}: {} vs {}", direct[i], via[i]);
            }
        }
        // unicycle, origin, e = 0: x_r row = v cos ψ − u_px + d̄₁
        let r0 = [0.0, 0.0, 0.0, 0.0];
        let g = sys.relative_dynamics(&r0, [0.3, 0.0], [0.1, 0.0], &[0.0; 3]).unwrap();
        let (mean, _) = sys.uncertainty.as_ref().unwrap().moments(&[0.0, 0.0, 0.0]).unwrap()[0];
        assert!((g[0] - (0.3 - 0.1 + mean)).abs() < 1e-14);
    }

    #[test]
    fn handcrafted_examples() {
        assert_eq!(handcrafted_disturbance(1.0, 0.77), 0.0);
        assert_eq!(handcrafted_disturbance(0.0, 0.0), -0.5);
        assert!((handcrafted_disturbance(0.0, PI / 2.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn integrate_examples() {
        let z = integrate(|_| vec![0.0, 0.0], &[1.0, 2.0], 0.1, Scheme::Rk4, None).unwrap();
        assert_eq!(z, vec![1.0, 2.0]);
        for scheme in [Scheme::Euler, Scheme::Rk4] {
            let s = integrate(|_| vec![1.0], &[0.0], 0.1, scheme, None).unwrap();
            assert!((s[0] - 0.1).abs() < 1e-15);
        }
        let e = integrate(|s| s.to_vec(), &[1.0], 0.1, Scheme::Rk4, None).unwrap();
        assert!((e[0] - 0.1f64.exp()).abs() < 1e-7);
        assert!((e[0] - 1.10517091).abs() < 1e-7);
        assert!(integrate(|s| s.to_vec(), &[1.0], 0.0, Scheme::Rk4, None).is_err());
        assert!(integrate(|_| vec![f64::NAN], &[1.0], 0.1, Scheme::Euler, None).is_err());
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |dt: f64| {
            let mut s = vec![1.0];
            let steps = (1.0 / dt).round() as usize;
            for _ in 0..steps {
                s = integrate(|x| x.to_vec(), &s, dt, Scheme::Rk4, None).unwrap();
            }
            (s[0] - 1f64.exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn angle_row_is_wrapped() {
        let s = integrate(|_| vec![0.0, 1.0], &[0.0, 3.1], 0.1, Scheme::Euler, Some(1)).unwrap();
        assert!(s[1] <= PI && s[1] > -PI);
        assert!((s[1] - (3.2 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn lattice_includes_vertices() {
        let b = InputBox(vec![(0.0, 1.0), (-1.0, 1.0)]);
        let l = b.lattice(5);
        assert_eq!(l.len(), 25);
        assert!(l.contains(&vec![1.0, -1.0]) && l.contains(&vec![0.0, 1.0]));
    }
}
