//! Scenario configuration, residual collection, the offline/online pipeline,
//! closed-loop rollouts against the truth model and Monte-Carlo containment
//! studies.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::{default_margin, hybrid_step, ControlDecision, HybridConfig, Mode, PerformanceController, PlanPoint};
use crate::dynamics::{
    handcrafted_disturbance, integrate, InputBox, RelativeMode, RelativeSystem, Scheme, TrackerModel,
};
use crate::error::{Error, Result};
use crate::gp::{Band, ConstantBox, DisturbanceBand, GpModel, KernelParams, Observation, UncertaintyModel};
use crate::grid::{Axis, GridSpec};
use crate::hji::{compute_vbar, extract_teb, solve_vi, Execution, SolverSettings, Teb};
use crate::planner::{augment_obstacles, lattice_dt, plan_with_growth, PlanTrajectory, Raster, Workspace};

fn invalid<T>(field: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::Validation { field: field.into(), message: message.into() })
}

/// Which disturbance description the tracking game uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    /// GP mean ± band, intersected with the observed hull.
    Gp,
    /// The observed `[min, max]` per component everywhere.
    Conservative,
}

impl UncertaintyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintyKind::Gp => "gp",
            UncertaintyKind::Conservative => "conservative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSettings {
    /// Per state-derivative component: fit a GP (true) or bound it by
    /// `noise_bound` alone (false).
    pub modeled_components: Vec<bool>,
    /// Tracking-state entries the GPs read.
    pub active_axes: Vec<usize>,
    /// Sampling interval per active axis for residual collection.
    pub sample_ranges: Vec<(f64, f64)>,
    pub samples: usize,
    pub measurement_noise_std: f64,
    pub kernel_init: KernelParams,
    pub band: Band,
    /// Known bounded noise per component, added to the band radius.
    pub noise_bound: Vec<f64>,
    /// Intersect the GP band with the observed residual hull.
    #[serde(default = "yes")]
    pub clip_to_observed: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSettings {
    /// Apply the state-dependent disturbance on `ẋ`.
    pub disturbance: bool,
    /// Uniform white noise amplitude on `ẏ` and `ψ̇`, held over a control period.
    pub noise_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSettings {
    /// Interior margin `δ`; one position cell when absent.
    #[serde(default)]
    pub margin: Option<f64>,
    pub performance: PerformanceController,
    pub period_s: f64,
    /// Rollout time after the plan ends.
    pub settle_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartState {
    pub position_m: [f64; 2],
    pub heading_rad: f64,
    /// Surge and yaw rate for the thruster model.
    #[serde(default)]
    pub rates: [f64; 2],
}

/// Everything a run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub mode: RelativeMode,
    pub tracker: TrackerModel,
    pub tracker_box: InputBox,
    /// Planner speed box `|u_p,x|, |u_p,y| ≤ planner_speed_m_s`.
    pub planner_speed_m_s: f64,
    /// Relative-state grid, one axis per relative coordinate.
    pub grid: GridSpec,
    /// `Ξ_y`, the y-range the TEB level is taken over.
    pub teb_y_range_m: (f64, f64),
    pub workspace: Workspace,
    pub start: StartState,
    pub gp: GpSettings,
    pub truth: TruthSettings,
    #[serde(default)]
    pub solver: SolverSettings,
    pub control: ControlSettings,
    pub horizon_cap: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let scn: Scenario = serde_json::from_str(&text)?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.tracker.state_dim()
    }

    pub fn planner_box(&self) -> InputBox {
        let u = self.planner_speed_m_s;
        InputBox(vec![(-u, u), (-u, u)])
    }

    pub fn position_spacing(&self) -> f64 {
        self.grid.spacing(0)
    }

    /// Planner step for one raster cell per step at full speed.
    pub fn planner_dt(&self) -> f64 {
        lattice_dt(self.position_spacing(), self.planner_speed_m_s)
    }

    pub fn validate(&self) -> Result<()> {
        let n_s = self.state_dim();
        let dim = self.mode.dim();
        match (self.mode, &self.tracker) {
            (RelativeMode::Unicycle4d, TrackerModel::Unicycle) => {}
            (RelativeMode::Heron6d, TrackerModel::Heron(p)) => p.validate()?,
            _ => return invalid("tracker", format!("tracker kind does not match mode {:?}", self.mode)),
        }
        self.tracker_box.validate("tracker_box")?;
        if self.tracker_box.dim() != 2 {
            return invalid("tracker_box", "needs two inputs");
        }
        if !(self.planner_speed_m_s > 0.0 && self.planner_speed_m_s.is_finite()) {
            return invalid("planner_speed_m_s", "must be positive");
        }
        if self.grid.ndim() != dim {
            return invalid("grid", format!("mode {:?} needs {dim} axes, got {}", self.mode, self.grid.ndim()));
        }
        let names = self.mode.axis_names();
        for (i, (a, want)) in self.grid.axes.iter().zip(names).enumerate() {
            if a.name != *want {
                return invalid(&format!("grid.axes[{i}].name"), format!("expected `{want}`, got `{}`", a.name));
            }
        }
        let h = self.grid.spacing(0);
        for i in 0..2 {
            let a = &self.grid.axes[i];
            if a.periodic || (a.lo + a.hi).abs() > 1e-9 || (a.n - 1) % 2 != 0 {
                return invalid(&format!("grid.axes[{i}]"), "position axes must be symmetric with a node at zero");
            }
            if (a.spacing() - h).abs() > 1e-9 * h {
                return invalid(&format!("grid.axes[{i}]"), "both position axes need the same spacing");
            }
        }
        let psi = &self.grid.axes[2];
        if !psi.periodic || (psi.period() - 2.0 * std::f64::consts::PI).abs() > 1e-9 {
            return invalid("grid.axes[2]", "heading axis must be periodic over 2π");
        }
        let ya = &self.grid.axes[dim - 1];
        let (ylo, yhi) = self.teb_y_range_m;
        if !(ylo <= yhi && ylo >= ya.lo - 1e-9 && yhi <= ya.hi + 1e-9) {
            return invalid("teb_y_range_m", "must be an interval inside the grid's y axis");
        }
        self.workspace.validate()?;
        self.workspace.raster_spec(h)?;
        let (wy0, wy1) = self.workspace.y_range_m;
        if wy0 < ya.lo - 1e-9 || wy1 > ya.hi + 1e-9 {
            return invalid("workspace.y_range_m", "must lie inside the grid's y axis");
        }
        if !self.workspace.x_range_m.0.le(&self.start.position_m[0])
            || self.start.position_m[0] > self.workspace.x_range_m.1
            || self.start.position_m[1] < wy0
            || self.start.position_m[1] > wy1
        {
            return invalid("start.position_m", "must lie in the workspace");
        }
        let g = &self.gp;
        if g.modeled_components.len() != n_s {
            return invalid("gp.modeled_components", format!("needs {n_s} entries"));
        }
        if g.noise_bound.len() != n_s || g.noise_bound.iter().any(|b| !(*b >= 0.0)) {
            return invalid("gp.noise_bound", format!("needs {n_s} entries, each >= 0"));
        }
        if g.active_axes.is_empty() || g.active_axes.iter().any(|&a| a == 0 || a >= n_s) {
            return invalid("gp.active_axes", format!("entries must lie in 1..{n_s} (x is not an input)"));
        }
        if g.sample_ranges.len() != g.active_axes.len() || g.sample_ranges.iter().any(|r| !(r.0 <= r.1)) {
            return invalid("gp.sample_ranges", "one ordered interval per active axis");
        }
        if g.kernel_init.length_scales.len() != g.active_axes.len() {
            return invalid("gp.kernel_init.length_scales", "one length scale per active axis");
        }
        g.kernel_init.validate().map_err(|e| Error::Validation { field: "gp.kernel_init".into(), message: e.to_string() })?;
        g.band.halfwidth().map_err(|e| Error::Validation { field: "gp.band".into(), message: e.to_string() })?;
        if g.samples == 0 {
            return invalid("gp.samples", "must be at least 1");
        }
        if !(g.measurement_noise_std >= 0.0) {
            return invalid("gp.measurement_noise_std", "must be >= 0");
        }
        if !(self.truth.noise_amplitude >= 0.0) {
            return invalid("truth.noise_amplitude", "must be >= 0");
        }
        self.solver.validate()?;
        let c = &self.control;
        if c.margin.is_some_and(|m| !(m >= 0.0)) {
            return invalid("control.margin", "must be >= 0");
        }
        if !(c.period_s > 0.0) || !(c.settle_s >= 0.0) {
            return invalid("control.period_s", "period must be positive and settle time >= 0");
        }
        if matches!(c.performance, PerformanceController::Proportional { .. }) && n_s != 3 {
            return invalid("control.performance", "the proportional law drives a unicycle");
        }
        if self.horizon_cap == 0 {
            return invalid("horizon_cap", "must be at least 1");
        }
        if self.trials == 0 {
            return invalid("trials", "must be at least 1");
        }
        Ok(())
    }

    /// Scales every node count by `f`, keeping a node at zero offset on the
    /// position axes.
    pub fn scale_grid(&mut self, f: f64) -> Result<()> {
        if !(f > 0.0 && f.is_finite()) {
            return invalid("grid_scale", "must be positive");
        }
        let ws = &self.workspace;
        let axes = self
            .grid
            .axes
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut a = a.clone();
                if a.periodic {
                    a.n = ((a.n as f64 * f).round() as usize).max(3);
                } else if i < 2 {
                    // position spacing must still divide the workspace extent
                    let cells = ((a.n - 1) as f64 * f / 2.0).round().max(1.0) as usize * 2;
                    a.n = cells + 1;
                } else {
                    a.n = (((a.n - 1) as f64 * f).round() as usize).max(1) + 1;
                }
                a
            })
            .collect();
        self.grid = GridSpec::new(axes)?;
        let h = self.grid.spacing(0);
        if ws.raster_spec(h).is_err() {
            return invalid("grid_scale", format!("scaled position spacing {h} does not divide the workspace"));
        }
        self.validate()
    }
}

/// Truth derivative: nominal model plus the handcrafted disturbance on `ẋ`
/// and held white noise on `ẏ`, `ψ̇`.
pub fn truth_derivative(scn: &Scenario, s: &[f64], u: [f64; 2], noise: [f64; 2]) -> Vec<f64> {
    let mut ds = scn.tracker.nominal(s, u);
    if scn.truth.disturbance {
        ds[0] += handcrafted_disturbance(s[1], s[2]);
    }
    ds[1] += noise[0];
    ds[2] += noise[1];
    ds
}

fn sample_noise(scn: &Scenario, rng: &mut impl Rng) -> [f64; 2] {
    let a = scn.truth.noise_amplitude;
    if a == 0.0 {
        return [0.0, 0.0];
    }
    [rng.gen_range(-a..=a), rng.gen_range(-a..=a)]
}

/// Residuals `truth − nominal` plus Gaussian measurement noise, per
/// derivative component, at states drawn uniformly from the sample ranges.
pub fn collect_residuals(scn: &Scenario, n: usize, seed: u64) -> Result<Vec<Vec<Observation>>> {
    if n == 0 {
        return invalid("gp.samples", "must be at least 1");
    }
    let n_s = scn.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::with_capacity(n); n_s];
    for _ in 0..n {
        let mut s = vec![0.0; n_s];
        for (&a, &(lo, hi)) in scn.gp.active_axes.iter().zip(&scn.gp.sample_ranges) {
            s[a] = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        }
        let noise = sample_noise(scn, &mut rng);
        let truth = truth_derivative(scn, &s, [0.0, 0.0], noise);
        let nominal = scn.tracker.nominal(&s, [0.0, 0.0]);
        let input: Vec<f64> = scn.gp.active_axes.iter().map(|&a| s[a]).collect();
        for j in 0..n_s {
            let e: f64 = rng.sample(StandardNormal);
            out[j].push(Observation {
                input: input.clone(),
                target: truth[j] - nominal[j] + scn.gp.measurement_noise_std * e,
            });
        }
    }
    Ok(out)
}

/// GP band model and the conservative box, both from the same residuals.
#[derive(Debug, Clone)]
pub struct FittedUncertainty {
    pub gp: UncertaintyModel,
    pub conservative: ConstantBox,
}

pub fn fit_uncertainty(scn: &Scenario, obs: &[Vec<Observation>]) -> Result<FittedUncertainty> {
    let conservative = ConstantBox::from_observations(obs);
    let components = obs
        .iter()
        .zip(&scn.gp.modeled_components)
        .map(|(o, &m)| if m { GpModel::fit(o, &scn.gp.kernel_init).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    let mut gp = UncertaintyModel::new(components, scn.gp.active_axes.clone(), scn.gp.band)?;
    gp.noise_bound = scn.gp.noise_bound.clone();
    if scn.gp.clip_to_observed {
        gp.clip = Some(conservative.bounds.clone());
    }
    Ok(FittedUncertainty { gp, conservative })
}

/// Relative system for either disturbance description. Both share the
/// conservative box as the dissipation envelope, so their solves use the
/// same pseudo-time step.
pub fn build_system(scn: &Scenario, fit: &FittedUncertainty, kind: UncertaintyKind) -> Result<RelativeSystem> {
    let cons: Arc<dyn DisturbanceBand> = Arc::new(fit.conservative.clone());
    match kind {
        UncertaintyKind::Gp => {
            let mut sys = RelativeSystem::with_uncertainty(
                scn.mode,
                scn.tracker.clone(),
                scn.tracker_box.clone(),
                scn.planner_box(),
                Arc::new(fit.gp.clone()),
            )?;
            sys.envelope = Some(cons);
            Ok(sys)
        }
        UncertaintyKind::Conservative => RelativeSystem::new(
            scn.mode,
            scn.tracker.clone(),
            scn.tracker_box.clone(),
            scn.planner_box(),
            cons,
        ),
    }
}

/// Value function, level and TEB for one system.
pub fn solve_teb(scn: &Scenario, sys: &RelativeSystem) -> Result<Teb> {
    let v = solve_vi(sys, &scn.grid, &scn.solver)?;
    let y_axis = scn.mode.y_axis();
    let vbar = compute_vbar(&v, y_axis, scn.teb_y_range_m)?;
    extract_teb(v, vbar, y_axis, scn.teb_y_range_m)
}

/// Obstacle raster, its TEB augmentation and the plan.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub obstacles: Raster,
    pub augmented: Raster,
    pub plan: PlanTrajectory,
}

pub fn plan_for(scn: &Scenario, teb: &Teb) -> Result<PlanOutcome> {
    let obstacles = scn.workspace.rasterize(scn.position_spacing())?;
    let augmented = augment_obstacles(&obstacles, teb)?;
    let p0 = (scn.start.position_m[0], scn.start.position_m[1]);
    let plan = match plan_with_growth(&scn.workspace, &augmented, p0, scn.planner_dt(), scn.horizon_cap) {
        Ok(p) => p,
        // a start inside the augmented obstacles is a planning failure
        Err(Error::Infeasible(m)) => {
            log::warn!("{m}");
            PlanTrajectory {
                dt_s: scn.planner_dt(),
                horizon: 0,
                feasible: false,
                positions: Vec::new(),
                inputs: Vec::new(),
                cost: f64::INFINITY,
                attempts: Vec::new(),
            }
        }
        Err(e) => return Err(e),
    };
    Ok(PlanOutcome { obstacles, augmented, plan })
}

/// Where the rollout's disturbance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceSource {
    /// The truth model.
    Truth,
    /// The band vertex maximizing `∇V·ṙ` for the chosen input, per step.
    InBandWorst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub s: Vec<f64>,
    pub p: [f64; 2],
    pub r: Vec<f64>,
    pub u: [f64; 2],
    pub mode: Mode,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub trial: usize,
    pub steps: usize,
    pub contained_steps: usize,
    pub exits: usize,
    pub collided: bool,
    pub goal_reached: bool,
    /// The relative state left the value grid and the trial stopped.
    pub aborted: bool,
    /// Ends inside the TEB after at least one exit.
    pub recovered: bool,
    pub safe_steps: usize,
    pub max_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub records: Vec<StepRecord>,
    pub summary: TrialSummary,
}

impl SimLog {
    /// CSV: `t, s…, x_p, y_p, r…, u0, u1, mode, value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let Some(first) = self.records.first() else {
            writeln!(w, "t")?;
            return Ok(());
        };
        let mut header = String::from("t");
        for i in 0..first.s.len() {
            header.push_str(&format!(",s{i}"));
        }
        header.push_str(",x_p,y_p");
        for i in 0..first.r.len() {
            header.push_str(&format!(",r{i}"));
        }
        header.push_str(",u0,u1,mode,value");
        writeln!(w, "{header}")?;
        for rec in &self.records {
            let mut line = format!("{}", rec.t);
            for x in &rec.s {
                line.push_str(&format!(",{x}"));
            }
            line.push_str(&format!(",{},{}", rec.p[0], rec.p[1]));
            for x in &rec.r {
                line.push_str(&format!(",{x}"));
            }
            line.push_str(&format!(",{},{},{},{}", rec.u[0], rec.u[1], rec.mode.as_str(), rec.value));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Hybrid controller settings resolved against a TEB.
pub fn hybrid_config(scn: &Scenario, teb: &Teb) -> HybridConfig {
    HybridConfig {
        margin: scn.control.margin.unwrap_or_else(|| default_margin(teb)),
        performance: scn.control.performance.clone(),
        period_s: scn.control.period_s,
    }
}

fn in_true_obstacle(ws: &Workspace, x: f64, y: f64) -> bool {
    let rho = ws.footprint_radius_m;
    ws.obstacles.iter().any(|o| {
        let gx = (o.x_m.0 - x).max(x - o.x_m.1).max(0.0);
        let gy = (o.y_m.0 - y).max(y - o.y_m.1).max(0.0);
        let inside = x > o.x_m.0 && x < o.x_m.1 && y > o.y_m.0 && y < o.y_m.1;
        inside || (rho > 0.0 && gx.hypot(gy) < rho)
    })
}

/// Worst band vertex for input `u` at relative state `r`.
fn worst_vertex(sys: &RelativeSystem, teb: &Teb, r: &[f64], u: [f64; 2], up: [f64; 2]) -> Result<Vec<f64>> {
    let s = sys.tracker_state(r);
    let band = sys.disturbance.band(&s)?;
    let grad = teb.value.field.gradient(r)?;
    let free: Vec<usize> = (0..band.len()).filter(|&j| band[j].1 > 0.0).collect();
    let mut best = (f64::NEG_INFINITY, band.iter().map(|b| b.0).collect::<Vec<_>>());
    for mask in 0..(1usize << free.len()) {
        let mut d: Vec<f64> = band.iter().map(|b| b.0).collect();
        for (k, &j) in free.iter().enumerate() {
            d[j] += if mask >> k & 1 == 1 { band[j].1 } else { -band[j].1 };
        }
        let g = sys.dynamics_with_disturbance(r, u, up, &d)?;
        let rate: f64 = g.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if rate > best.0 {
            best = (rate, d);
        }
    }
    Ok(best.1)
}

/// One closed-loop trial: the planner follows `plan` exactly, the tracker
/// runs the hybrid law every control period against `source`, and the
/// truth is integrated with RK4 over each period.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    scn: &Scenario,
    sys: &RelativeSystem,
    teb: &Teb,
    plan: &PlanTrajectory,
    cfg: &HybridConfig,
    source: DisturbanceSource,
    s0: Vec<f64>,
    seed: u64,
    trial: usize,
) -> Result<SimLog> {
    if !plan.feasible || plan.positions.is_empty() {
        return Err(Error::Usage("rollout needs a feasible plan".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    let dt = cfg.period_s;
    let end = plan.horizon as f64 * plan.dt_s + scn.control.settle_s;
    let steps = (end / dt).round() as usize;
    let heading = scn.mode.heading_axis();
    let margin = cfg.margin;
    let mut s = s0;
    let mut records = Vec::with_capacity(steps + 1);
    let mut summary = TrialSummary {
        seed,
        trial,
        steps: 0,
        contained_steps: 0,
        exits: 0,
        collided: false,
        goal_reached: false,
        aborted: false,
        recovered: false,
        safe_steps: 0,
        max_value: f64::NEG_INFINITY,
    };
    let mut inside = true;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let pp = PlanPoint { position: plan.position_at(t), velocity: plan.input_at(t) };
        if in_true_obstacle(&scn.workspace, s[0], s[1]) {
            summary.collided = true;
        }
        let decision: ControlDecision = match hybrid_step(&s, &pp, teb, cfg, sys) {
            Ok(d) => d,
            Err(Error::Domain(m)) => {
                log::debug!("trial {trial} aborted at t = {t:.2}: {m}");
                summary.aborted = true;
                summary.steps += 1;
                summary.exits += usize::from(inside);
                break;
            }
            Err(e) => return Err(e),
        };
        summary.steps += 1;
        summary.max_value = summary.max_value.max(decision.value);
        let now_inside = decision.value <= teb.level + margin;
        if now_inside {
            summary.contained_steps += 1;
        } else if inside {
            summary.exits += 1;
        }
        inside = now_inside;
        if decision.mode == Mode::Safe {
            summary.safe_steps += 1;
        }
        records.push(StepRecord {
            t,
            s: s.clone(),
            p: pp.position,
            r: decision.relative_state.clone(),
            u: decision.input,
            mode: decision.mode,
            value: decision.value,
        });
        if k == steps {
            break;
        }
        let u = decision.input;
        s = match source {
            DisturbanceSource::Truth => {
                let noise = sample_noise(scn, &mut rng);
                integrate(|x| truth_derivative(scn, x, u, noise), &s, dt, Scheme::Rk4, Some(heading))?
            }
            DisturbanceSource::InBandWorst => {
                let d = worst_vertex(sys, teb, &decision.relative_state, u, pp.velocity)?;
                let nominal = |x: &[f64]| -> Vec<f64> {
                    scn.tracker.nominal(x, u).iter().zip(&d).map(|(a, b)| a + b).collect()
                };
                integrate(nominal, &s, dt, Scheme::Rk4, Some(heading))?
            }
        };
    }
    if let Some(last) = records.last() {
        summary.goal_reached = !summary.aborted && scn.workspace.goal.contains(last.s[0], last.s[1]);
        summary.recovered = !summary.aborted && summary.exits > 0 && last.value <= teb.level;
    }
    Ok(SimLog { records, summary })
}

/// Initial tracker state at the plan start with the given relative offsets.
pub fn state_from_relative(scn: &Scenario, p0: [f64; 2], r: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; scn.state_dim()];
    s[0] = p0[0] + r[0];
    s[1] = p0[1] + r[1];
    s[2] = r[2];
    for i in 3..scn.state_dim() {
        s[i] = r[i];
    }
    s
}

/// Draws `(x_r, y_r, ψ, …)` uniformly over the grid until the relative state
/// at the plan start has `V ≤ V̲`. A set too thin for rejection sampling
/// falls back to a uniform pick among its grid nodes.
fn sample_in_teb(scn: &Scenario, teb: &Teb, p0: [f64; 2], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let spec = teb.spec();
    let y_axis = scn.mode.y_axis();
    for _ in 0..20_000 {
        let mut r = vec![0.0; spec.ndim()];
        for (i, a) in spec.axes.iter().enumerate() {
            if i == y_axis {
                continue;
            }
            r[i] = if a.periodic { rng.gen_range(a.lo..a.lo + a.period()) } else { rng.gen_range(a.lo..=a.hi) };
        }
        r[y_axis] = p0[1] + r[1];
        if !spec.contains(&r) {
            continue;
        }
        if teb.value.value_at(&r)? <= teb.level {
            return Ok(r);
        }
    }
    let mut members = Vec::new();
    for k in 0..spec.len() {
        let mut r = spec.coords_of(k);
        r[y_axis] = p0[1] + r[1];
        if spec.contains(&r) && teb.value.value_at(&r)? <= teb.level {
            members.push(r);
        }
    }
    if members.is_empty() {
        return Err(Error::Numerical("could not sample an initial state inside the TEB".into()));
    }
    let i = rng.gen_range(0..members.len());
    Ok(members.swap_remove(i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub source: DisturbanceSource,
    pub trials: usize,
    pub seed: u64,
    pub level: f64,
    pub margin: f64,
    /// Steps with `V ≤ V̲ + δ` over all steps.
    pub containment_fraction: f64,
    pub fully_contained_trials: usize,
    pub trials_with_exits: usize,
    pub recovered_trials: usize,
    pub aborted_trials: usize,
    pub collisions: usize,
    pub goal_reach_rate: f64,
    pub safe_step_fraction: f64,
    pub max_value: f64,
}

impl Metrics {
    pub fn from_summaries(source: DisturbanceSource, seed: u64, level: f64, margin: f64, sums: &[TrialSummary]) -> Self {
        let steps: usize = sums.iter().map(|s| s.steps).sum();
        let contained: usize = sums.iter().map(|s| s.contained_steps).sum();
        let safe: usize = sums.iter().map(|s| s.safe_steps).sum();
        let n = sums.len().max(1) as f64;
        Self {
            source,
            trials: sums.len(),
            seed,
            level,
            margin,
            containment_fraction: if steps == 0 { 1.0 } else { contained as f64 / steps as f64 },
            fully_contained_trials: sums.iter().filter(|s| s.exits == 0 && !s.aborted).count(),
            trials_with_exits: sums.iter().filter(|s| s.exits > 0).count(),
            recovered_trials: sums.iter().filter(|s| s.recovered).count(),
            aborted_trials: sums.iter().filter(|s| s.aborted).count(),
            collisions: sums.iter().filter(|s| s.collided).count(),
            goal_reach_rate: sums.iter().filter(|s| s.goal_reached).count() as f64 / n,
            safe_step_fraction: if steps == 0 { 0.0 } else { safe as f64 / steps as f64 },
            max_value: sums.iter().map(|s| s.max_value).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// `trials` seeded rollouts from random `r₀ ∈ 𝓑` at the plan start. Trials
/// run in parallel with independent random streams; results are in trial order.
#[allow(clippy::too_many_arguments)]
pub fn containment_study(
    scn: &Scenario,
    sys: &RelativeSystem,
    teb: &Teb,
    plan: &PlanTrajectory,
    cfg: &HybridConfig,
    source: DisturbanceSource,
    trials: usize,
    seed: u64,
) -> Result<(Metrics, Vec<SimLog>)> {
    containment_study_with(scn, sys, teb, plan, cfg, source, trials, seed, Execution::Parallel)
}

/// [`containment_study`] with an explicit execution mode. Both modes give
/// identical results.
#[allow(clippy::too_many_arguments)]
pub fn containment_study_with(
    scn: &Scenario,
    sys: &RelativeSystem,
    teb: &Teb,
    plan: &PlanTrajectory,
    cfg: &HybridConfig,
    source: DisturbanceSource,
    trials: usize,
    seed: u64,
    execution: Execution,
) -> Result<(Metrics, Vec<SimLog>)> {
    if trials == 0 {
        return invalid("trials", "must be at least 1");
    }
    if !plan.feasible {
        return Err(Error::Usage("containment study needs a feasible plan".into()));
    }
    let p0 = plan.positions[0];
    let run = |i: usize| -> Result<SimLog> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e57);
        rng.set_stream(i as u64 + 1);
        let r0 = sample_in_teb(scn, teb, p0, &mut rng)?;
        let s0 = state_from_relative(scn, p0, &r0);
        rollout(scn, sys, teb, plan, cfg, source, s0, seed, i)
    };
    let logs: Vec<SimLog> = match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..trials).into_par_iter().map(run).collect::<Result<Vec<_>>>()?
        }
        _ => (0..trials).map(run).collect::<Result<Vec<_>>>()?,
    };
    let sums: Vec<TrialSummary> = logs.iter().map(|l| l.summary.clone()).collect();
    Ok((Metrics::from_summaries(source, seed, teb.level, cfg.margin, &sums), logs))
}

/// Stage at which a pipeline run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teb,
    Planning,
    Rollout,
}

/// Everything one pipeline run produced, up to the failing stage.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub kind: UncertaintyKind,
    pub observations: Vec<Vec<Observation>>,
    pub fit: FittedUncertainty,
    pub system: RelativeSystem,
    pub teb: Option<Teb>,
    pub planning: Option<PlanOutcome>,
    pub log: Option<SimLog>,
    pub failure: Option<(Stage, String)>,
}

impl PipelineOutcome {
    pub fn feasible(&self) -> bool {
        self.planning.as_ref().is_some_and(|p| p.plan.feasible)
    }
}

/// Residuals → fit → solve → level → TEB → augmentation → plan → rollout.
/// TEB and planning infeasibility are reported in `failure`, not as errors.
pub fn run_pipeline(scn: &Scenario, kind: UncertaintyKind) -> Result<PipelineOutcome> {
    scn.validate()?;
    let observations = collect_residuals(scn, scn.gp.samples, scn.seed)?;
    let fit = fit_uncertainty(scn, &observations)?;
    run_pipeline_with(scn, kind, observations, fit)
}

/// [`run_pipeline`] from already collected and fitted residuals.
pub fn run_pipeline_with(
    scn: &Scenario,
    kind: UncertaintyKind,
    observations: Vec<Vec<Observation>>,
    fit: FittedUncertainty,
) -> Result<PipelineOutcome> {
    let system = build_system(scn, &fit, kind)?;
    let mut out = PipelineOutcome {
        kind,
        observations,
        fit,
        system,
        teb: None,
        planning: None,
        log: None,
        failure: None,
    };
    let teb = match solve_teb(scn, &out.system) {
        Ok(t) => t,
        Err(Error::Infeasible(m)) => {
            out.failure = Some((Stage::Teb, m));
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    let planning = plan_for(scn, &teb)?;
    out.teb = Some(teb);
    if !planning.plan.feasible {
        let tried = planning.plan.attempts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ");
        out.failure = Some((Stage::Planning, format!("no plan reaches the goal at horizons {{{tried}}}")));
        out.planning = Some(planning);
        return Ok(out);
    }
    let teb = out.teb.as_ref().expect("set above");
    if teb.truncated {
        // a feasible plan around a truncated TEB carries no guarantee
        return Err(Error::Domain(
            "TEB reaches the edge of the position axes; enlarge the grid before trusting the plan".into(),
        ));
    }
    let cfg = hybrid_config(scn, teb);
    let p0 = planning.plan.positions[0];
    let mut s0 = vec![0.0; scn.state_dim()];
    s0[0] = p0[0];
    s0[1] = p0[1];
    s0[2] = scn.start.heading_rad;
    if s0.len() == 5 {
        s0[3] = scn.start.rates[0];
        s0[4] = scn.start.rates[1];
    }
    let log = rollout(scn, &out.system, teb, &planning.plan, &cfg, DisturbanceSource::Truth, s0, scn.seed, 0)?;
    if log.summary.aborted {
        out.failure = Some((Stage::Rollout, "relative state left the value grid".into()));
    }
    out.planning = Some(planning);
    out.log = Some(log);
    Ok(out)
}

/// Position-axis grid of the given extent for the unicycle relative state.
pub fn unicycle_grid(half_width_m: f64, position_nodes: usize, heading_nodes: usize, y: (f64, f64), y_nodes: usize) -> Result<GridSpec> {
    let pi = std::f64::consts::PI;
    GridSpec::new(vec![
        Axis::new("x_r", -half_width_m, half_width_m, position_nodes),
        Axis::new("y_r", -half_width_m, half_width_m, position_nodes),
        Axis::periodic("psi", -pi, pi, heading_nodes),
        Axis::new("y", y.0, y.1, y_nodes),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario() -> Scenario {
        serde_json::from_str(include_str!("../../../scenarios/sim1.json")).unwrap()
    }

    fn field_of(e: Error) -> String {
        match e {
            Error::Validation { field, .. } => field,
            other => panic!("expected a validation error, got {other}"),
        }
    }

    #[test]
    fn bundled_scenario_validates() {
        scenario().validate().unwrap();
    }

    #[test]
    fn validation_names_the_field() {
        let mut s = scenario();
        s.grid.axes[2].name = "theta".into();
        assert_eq!(field_of(s.validate().unwrap_err()), "grid.axes[2].name");

        let mut s = scenario();
        s.grid.axes[2].periodic = false;
        assert_eq!(field_of(s.validate().unwrap_err()), "grid.axes[2]");

        let mut s = scenario();
        s.grid.axes[0].lo = -0.8;
        assert_eq!(field_of(s.validate().unwrap_err()), "grid.axes[0]");

        let mut s = scenario();
        s.teb_y_range_m = (-2.0, 1.0);
        assert_eq!(field_of(s.validate().unwrap_err()), "teb_y_range_m");

        let mut s = scenario();
        s.gp.noise_bound.pop();
        assert_eq!(field_of(s.validate().unwrap_err()), "gp.noise_bound");

        let mut s = scenario();
        s.gp.active_axes = vec![0, 2];
        assert_eq!(field_of(s.validate().unwrap_err()), "gp.active_axes");

        let mut s = scenario();
        s.tracker_box = InputBox(vec![(0.0, 1.0)]);
        assert_eq!(field_of(s.validate().unwrap_err()), "tracker_box");

        let mut s = scenario();
        s.planner_speed_m_s = 0.0;
        assert_eq!(field_of(s.validate().unwrap_err()), "planner_speed_m_s");

        let mut s = scenario();
        s.tracker = TrackerModel::Heron(Default::default());
        assert_eq!(field_of(s.validate().unwrap_err()), "tracker");

        let mut s = scenario();
        s.start.position_m = [5.0, 0.0];
        assert_eq!(field_of(s.validate().unwrap_err()), "start.position_m");

        let mut s = scenario();
        s.workspace.x_range_m = (-0.4, 2.81);
        assert_eq!(field_of(s.validate().unwrap_err()), "workspace.x_range_m");
    }

    #[test]
    fn scale_grid_keeps_a_zero_node() {
        let mut s = scenario();
        s.scale_grid(0.67).unwrap();
        let a = &s.grid.axes[0];
        assert_eq!(a.n, 21);
        assert_eq!(a.n % 2, 1);
        assert_eq!(s.grid.axes[2].n, 16);
        assert_eq!(s.grid.axes[3].n, 6);
        assert!(s.clone().scale_grid(0.0).is_err());
        // 2 m / 16 cells does not divide the 3.2 m workspace
        assert!(scenario().scale_grid(0.5).is_err());
    }

    #[test]
    fn truth_residual_at_origin() {
        let mut s = scenario();
        s.truth.noise_amplitude = 0.0;
        let ds = truth_derivative(&s, &[0.0, 0.0, 0.0], [0.0, 0.0], [0.0, 0.0]);
        assert_eq!(ds, vec![-0.5, 0.0, 0.0]);
        let ds = truth_derivative(&s, &[0.0, 1.0, 0.3], [1.0, 0.0], [0.01, -0.02]);
        assert!((ds[0] - 0.3f64.cos()).abs() < 1e-15);
        assert!((ds[1] - 0.3f64.sin() - 0.01).abs() < 1e-15);
        assert_eq!(ds[2], -0.02);
    }

    #[test]
    fn residuals_honor_sampling_ranges() {
        let s = scenario();
        let obs = collect_residuals(&s, 60, 3).unwrap();
        assert_eq!(obs.len(), 3);
        for comp in &obs {
            assert_eq!(comp.len(), 60);
            for o in comp {
                assert!(o.input.iter().all(|x| (-1.0..=1.0).contains(x)));
            }
        }
        // ẋ residual = disturbance + N(0, 0.01²) noise
        for o in &obs[0] {
            let d = handcrafted_disturbance(o.input[0], o.input[1]);
            assert!((o.target - d).abs() < 0.06);
        }
        assert_eq!(obs, collect_residuals(&s, 60, 3).unwrap());
        assert_ne!(obs, collect_residuals(&s, 60, 4).unwrap());
        assert!(collect_residuals(&s, 0, 3).is_err());
    }

    #[test]
    fn metrics_aggregate_summaries() {
        let base = TrialSummary {
            seed: 1,
            trial: 0,
            steps: 10,
            contained_steps: 10,
            exits: 0,
            collided: false,
            goal_reached: true,
            aborted: false,
            recovered: false,
            safe_steps: 4,
            max_value: 0.5,
        };
        let exited = TrialSummary { trial: 1, contained_steps: 6, exits: 2, recovered: true, goal_reached: false, max_value: 0.9, ..base.clone() };
        let aborted = TrialSummary { trial: 2, steps: 5, contained_steps: 4, exits: 1, aborted: true, collided: true, goal_reached: false, ..base.clone() };
        let m = Metrics::from_summaries(DisturbanceSource::Truth, 1, 0.7, 0.05, &[base, exited, aborted]);
        assert_eq!(m.trials, 3);
        assert!((m.containment_fraction - 20.0 / 25.0).abs() < 1e-15);
        assert_eq!(m.fully_contained_trials, 1);
        assert_eq!(m.trials_with_exits, 2);
        assert_eq!(m.recovered_trials, 1);
        assert_eq!(m.aborted_trials, 1);
        assert_eq!(m.collisions, 1);
        assert!((m.goal_reach_rate - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.safe_step_fraction - 12.0 / 25.0).abs() < 1e-15);
        assert_eq!(m.max_value, 0.9);
    }

    #[test]
    fn relative_offsets_place_the_tracker() {
        let s = scenario();
        let st = state_from_relative(&s, [1.0, -0.5], &[0.2, 0.1, 0.3, -0.4]);
        assert_eq!(st, vec![1.2, -0.4, 0.3]);
    }

    #[test]
    fn true_obstacle_uses_open_box_and_footprint() {
        let mut w = scenario().workspace;
        assert!(in_true_obstacle(&w, 1.65, 0.0));
        assert!(!in_true_obstacle(&w, 1.55, 0.0));
        w.footprint_radius_m = 0.1;
        assert!(in_true_obstacle(&w, 1.5, 0.0));
        assert!(!in_true_obstacle(&w, 1.4, 0.0));
    }
}
