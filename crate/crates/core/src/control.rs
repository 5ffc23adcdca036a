//! Online hybrid controller: a performance law while the relative state is
//! well inside the TEB, the minimax safe controller otherwise.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, RelativeSystem, TrackerModel};
use crate::error::{usage, Error, Result};
use crate::grid::GridSpec;
use crate::hji::{safe_control, Teb};
use crate::planner::Raster;

/// Law used while the state is in the TEB interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerformanceController {
    /// A fixed input, clamped to the tracker box.
    Constant { input: [f64; 2] },
    /// Unicycle law toward the current plan point: forward speed from the
    /// planner velocity plus `speed_gain` times the along-heading error,
    /// turn rate `heading_gain` times the heading error to the point.
    Proportional { speed_gain: f64, heading_gain: f64 },
    /// Use the safe controller everywhere.
    Safe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Interior margin `δ` in value units: performance mode needs `V < V̲ − δ`.
    pub margin: f64,
    pub performance: PerformanceController,
    pub period_s: f64,
}

impl HybridConfig {
    pub fn validate(&self, tracker: &TrackerModel) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Validation { field: "control.margin".into(), message: "must be finite and >= 0".into() });
        }
        if !(self.period_s > 0.0 && self.period_s.is_finite()) {
            return Err(Error::Validation { field: "control.period_s".into(), message: "must be positive".into() });
        }
        if matches!(self.performance, PerformanceController::Proportional { .. })
            && !matches!(tracker, TrackerModel::Unicycle)
        {
            return Err(Error::Validation {
                field: "control.performance".into(),
                message: "the proportional law drives a unicycle; use constant or safe".into(),
            });
        }
        Ok(())
    }
}

/// Default interior margin: one position cell of value slack. The stage
/// cost is 1-Lipschitz in position, so this covers interpolation between
/// neighboring position nodes.
pub fn default_margin(teb: &Teb) -> f64 {
    let s = teb.spec();
    s.spacing(0).max(s.spacing(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Performance,
    Safe,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Performance => "performance",
            Mode::Safe => "safe",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub input: [f64; 2],
    pub mode: Mode,
    pub value: f64,
    pub relative_state: Vec<f64>,
}

/// Current plan point and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanPoint {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

fn performance_input(ctrl: &PerformanceController, s: &[f64], p: &PlanPoint) -> Option<[f64; 2]> {
    match ctrl {
        PerformanceController::Constant { input } => Some(*input),
        PerformanceController::Proportional { speed_gain, heading_gain } => {
            let (ex, ey) = (p.position[0] - s[0], p.position[1] - s[1]);
            let (c, sn) = (s[2].cos(), s[2].sin());
            let v = p.velocity[0] * c + p.velocity[1] * sn + speed_gain * (ex * c + ey * sn);
            let w = if ex.hypot(ey) > 1e-9 { heading_gain * wrap_angle(ey.atan2(ex) - s[2]) } else { 0.0 };
            Some([v, w])
        }
        PerformanceController::Safe => None,
    }
}

/// One decision of the hybrid law at tracking state `s`. Leaving the value
/// grid is an error: the caller aborts the trial.
pub fn hybrid_step(s: &[f64], p: &PlanPoint, teb: &Teb, cfg: &HybridConfig, sys: &RelativeSystem) -> Result<ControlDecision> {
    let r = sys.relative_state(s, p.position)?;
    let spec = teb.spec();
    if !spec.contains(&r) {
        return Err(Error::Domain(format!("relative state {r:?} left the value grid")));
    }
    let value = teb.value.value_at(&r)?;
    let interior = value < teb.level - cfg.margin;
    let chosen = if interior { performance_input(&cfg.performance, s, p) } else { None };
    let (input, mode) = match chosen {
        Some(mut u) => {
            sys.tracker_box.clamp(&mut u);
            (u, Mode::Performance)
        }
        None => {
            let u = safe_control(&teb.value, &r, sys)?;
            if u.len() != 2 {
                return usage("tracker input must be 2-D");
            }
            ([u[0], u[1]], if interior { Mode::Performance } else { Mode::Safe })
        }
    };
    Ok(ControlDecision { input, mode, value, relative_state: r })
}

/// Writes decisions as CSV: `t,mode,value,r0..r{n-1},u0,u1`.
pub fn write_decisions<W: Write>(mut w: W, rows: &[(f64, ControlDecision)]) -> Result<()> {
    let n = rows.first().map_or(0, |(_, d)| d.relative_state.len());
    let mut header = String::from("t,mode,value");
    for i in 0..n {
        header.push_str(&format!(",r{i}"));
    }
    header.push_str(",u0,u1");
    writeln!(w, "{header}")?;
    for (t, d) in rows {
        let mut line = format!("{t},{},{}", d.mode.as_str(), d.value);
        for x in &d.relative_state {
            line.push_str(&format!(",{x}"));
        }
        line.push_str(&format!(",{},{}", d.input[0], d.input[1]));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Raster of `{(x, y) : (x − x_p, y − y_p) ∈ 𝓑ₑ(y)}` around a plan point,
/// using the projection at each cell's absolute `y`.
pub fn tracking_tube(teb: &Teb, raster: &GridSpec, p: (f64, f64)) -> Result<Raster> {
    let mut out = Raster::empty(raster.clone());
    let (nx, ny) = (out.nx(), out.ny());
    let ps = teb.spec();
    let (axr, ayr) = (ps.axes[0].clone(), ps.axes[1].clone());
    for iy in 0..ny {
        let y = raster.axes[1].coord(iy);
        let dy = y - p.1;
        if dy < ayr.lo - 1e-9 || dy > ayr.hi + 1e-9 {
            continue;
        }
        let proj = teb.projection_at(y)?;
        let jy = ayr.nearest(dy.clamp(ayr.lo, ayr.hi));
        for ix in 0..nx {
            let dx = raster.axes[0].coord(ix) - p.0;
            if dx < axr.lo - 1e-9 || dx > axr.hi + 1e-9 {
                continue;
            }
            if proj.is_member(axr.nearest(dx.clamp(axr.lo, axr.hi)), jy) {
                out.blocked[ix * ny + iy] = true;
            }
        }
    }
    Ok(out)
}
