//! Obstacle augmentation by the y-dependent TEB projection and exact
//! dynamic-programming planning for the discretized single integrator.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, usage, Error, Result};
use crate::grid::{Axis, GridSpec, ScalarField};
use crate::hji::Teb;

/// Closed axis-aligned box `[x.0, x.1] × [y.0, y.1]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_m: (f64, f64),
    pub y_m: (f64, f64),
}

impl Rect {
    pub fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        Self { x_m: x, y_m: y }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_m.0 && x <= self.x_m.1 && y >= self.y_m.0 && y <= self.y_m.1
    }

    fn valid(&self) -> bool {
        self.x_m.0.is_finite() && self.x_m.1.is_finite() && self.y_m.0.is_finite() && self.y_m.1.is_finite()
            && self.x_m.0 <= self.x_m.1
            && self.y_m.0 <= self.y_m.1
    }
}

/// Planar workspace: raster bounds, obstacle boxes, goal box and reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x_range_m: (f64, f64),
    pub y_range_m: (f64, f64),
    pub obstacles: Vec<Rect>,
    pub goal: Rect,
    pub reference_m: (f64, f64),
    /// Radius of the vessel footprint; obstacles are dilated by it before
    /// the TEB augmentation.
    #[serde(default)]
    pub footprint_radius_m: f64,
    /// Treat the first and last raster rows as obstacles so the tracker
    /// stays inside the workspace's y-range.
    #[serde(default)]
    pub wall_rows: bool,
}

/// Boolean occupancy raster on a 2-D `(x, y)` grid, `[ix * ny + iy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub spec: GridSpec,
    pub blocked: Vec<bool>,
}

impl Raster {
    pub fn empty(spec: GridSpec) -> Self {
        let n = spec.len();
        Self { spec, blocked: vec![false; n] }
    }

    pub fn nx(&self) -> usize {
        self.spec.axes[0].n
    }

    pub fn ny(&self) -> usize {
        self.spec.axes[1].n
    }

    pub fn is_blocked(&self, ix: usize, iy: usize) -> bool {
        self.blocked[ix * self.ny() + iy]
    }

    pub fn count(&self) -> usize {
        self.blocked.iter().filter(|b| **b).count()
    }

    /// Cell index of the node nearest to `(x, y)`, if inside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (ax, ay) = (&self.spec.axes[0], &self.spec.axes[1]);
        if !(ax.contains(x) && ay.contains(y)) {
            return None;
        }
        Some((ax.nearest(x), ay.nearest(y)))
    }

    pub fn is_subset_of(&self, other: &Raster) -> bool {
        self.blocked.iter().zip(&other.blocked).all(|(a, b)| !*a || *b)
    }

    /// 1.0 for blocked cells, 0.0 otherwise.
    pub fn to_field(&self) -> ScalarField {
        let vals = self.blocked.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        ScalarField::new(self.spec.clone(), vals).expect("raster shape matches its spec")
    }
}

/// Spacing and node alignment shared by the raster and the TEB's position axes.
fn axis_for(range: (f64, f64), h: f64, name: &str) -> Result<Axis> {
    if !(h > 0.0) || !(range.1 > range.0) {
        return usage(format!("raster axis {name} needs a positive spacing and a nonempty range"));
    }
    let cells = (range.1 - range.0) / h;
    let n = cells.round();
    if (cells - n).abs() > 1e-6 {
        return Err(Error::Validation {
            field: format!("workspace.{name}_range_m"),
            message: format!("extent {} is not a whole number of {h} m cells", range.1 - range.0),
        });
    }
    Ok(Axis::new(name, range.0, range.1, n as usize + 1))
}

impl Workspace {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Validation { field: format!("workspace.{field}"), message });
        if !(self.x_range_m.0 < self.x_range_m.1 && self.y_range_m.0 < self.y_range_m.1) {
            return bad("x_range_m", "ranges must be increasing".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.valid() {
                return bad(&format!("obstacles[{i}]"), "box bounds must be finite and ordered".into());
            }
        }
        if !self.goal.valid() {
            return bad("goal", "box bounds must be finite and ordered".into());
        }
        if !self.goal.contains(self.reference_m.0, self.reference_m.1) {
            return bad("reference_m", "reference point must lie in the goal box".into());
        }
        if !(self.footprint_radius_m >= 0.0 && self.footprint_radius_m.is_finite()) {
            return bad("footprint_radius_m", "must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Raster over the workspace bounds with node spacing `h`.
    pub fn raster_spec(&self, h: f64) -> Result<GridSpec> {
        GridSpec::new(vec![axis_for(self.x_range_m, h, "x")?, axis_for(self.y_range_m, h, "y")?])
    }

    /// Cells whose square overlaps an obstacle dilated by the footprint.
    /// Touching counts as overlap.
    pub fn rasterize(&self, h: f64) -> Result<Raster> {
        self.validate()?;
        let mut r = Raster::empty(self.raster_spec(h)?);
        let (nx, ny) = (r.nx(), r.ny());
        let rho = self.footprint_radius_m;
        for ix in 0..nx {
            let cx = r.spec.axes[0].coord(ix);
            for iy in 0..ny {
                let cy = r.spec.axes[1].coord(iy);
                let hit = self.obstacles.iter().any(|o| {
                    let gx = (o.x_m.0 - (cx + 0.5 * h)).max((cx - 0.5 * h) - o.x_m.1).max(0.0);
                    let gy = (o.y_m.0 - (cy + 0.5 * h)).max((cy - 0.5 * h) - o.y_m.1).max(0.0);
                    gx.hypot(gy) <= rho
                });
                let wall = self.wall_rows && (iy == 0 || iy + 1 == ny);
                r.blocked[ix * ny + iy] = hit || wall;
            }
        }
        let goal_hit = (0..nx * ny).any(|k| {
            r.blocked[k] && self.goal.contains(r.spec.axes[0].coord(k / ny), r.spec.axes[1].coord(k % ny))
        });
        if goal_hit {
            return Err(Error::Validation {
                field: "workspace.goal".into(),
                message: "goal box overlaps an obstacle on the raster".into(),
            });
        }
        Ok(r)
    }
}

/// `𝕆_p = ∪_{(x,y) ∈ 𝕆} (x, y) ⊕ (−𝓑ₑ(y))` on the raster. The raster and the
/// TEB's position axes must share their spacing, with the zero offset on a node.
pub fn augment_obstacles(obstacles: &Raster, teb: &Teb) -> Result<Raster> {
    let ps = teb.spec();
    let (axr, ayr) = (&ps.axes[0], &ps.axes[1]);
    let h = obstacles.spec.axes[0].spacing();
    for (a, name) in [(axr, "x_r"), (ayr, "y_r")] {
        if (a.spacing() - h).abs() > 1e-9 * h || (obstacles.spec.axes[1].spacing() - h).abs() > 1e-9 * h {
            return usage(format!("raster spacing {h} differs from the TEB {name} spacing {}", a.spacing()));
        }
        let zero = -a.lo / h;
        if (zero - zero.round()).abs() > 1e-6 {
            return usage(format!("TEB axis {name} has no node at zero offset"));
        }
    }
    let (nx, ny) = (obstacles.nx(), obstacles.ny());
    let ay = &obstacles.spec.axes[1];
    let mut out = obstacles.clone();
    let mut cache: Vec<Option<Vec<(i64, i64)>>> = vec![None; ny];
    for ix in 0..nx {
        for iy in 0..ny {
            if !obstacles.is_blocked(ix, iy) {
                continue;
            }
            if cache[iy].is_none() {
                let proj = teb.projection_at(ay.coord(iy)).map_err(|e| match e {
                    Error::Domain(m) => Error::Domain(format!("obstacle row y = {:.4}: {m}", ay.coord(iy))),
                    other => other,
                })?;
                let shifts = proj
                    .offsets()
                    .into_iter()
                    .map(|(dx, dy)| ((dx / h).round() as i64, (dy / h).round() as i64))
                    .collect();
                cache[iy] = Some(shifts);
            }
            for &(sx, sy) in cache[iy].as_ref().expect("filled above") {
                let (jx, jy) = (ix as i64 - sx, iy as i64 - sy);
                if jx >= 0 && jy >= 0 && (jx as usize) < nx && (jy as usize) < ny {
                    out.blocked[jx as usize * ny + jy as usize] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Open-loop plan for `p(k+1) = p(k) + Δt·u_p(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTrajectory {
    pub dt_s: f64,
    pub horizon: usize,
    pub feasible: bool,
    /// `T + 1` positions when feasible, empty otherwise.
    pub positions: Vec<[f64; 2]>,
    /// `T` inputs when feasible.
    pub inputs: Vec<[f64; 2]>,
    pub cost: f64,
    /// Horizons tried by [`plan_with_growth`], in order.
    pub attempts: Vec<usize>,
}

impl PlanTrajectory {
    fn infeasible(dt: f64, horizon: usize) -> Self {
        Self {
            dt_s: dt,
            horizon,
            feasible: false,
            positions: Vec::new(),
            inputs: Vec::new(),
            cost: f64::INFINITY,
            attempts: vec![horizon],
        }
    }

    /// Time of the first step inside the goal box.
    pub fn arrival_time(&self, goal: &Rect) -> Option<f64> {
        self.positions.iter().position(|p| goal.contains(p[0], p[1])).map(|k| k as f64 * self.dt_s)
    }

    /// Position at time `t`, linear between steps and held after the end.
    pub fn position_at(&self, t: f64) -> [f64; 2] {
        let last = self.positions.len() - 1;
        let u = (t / self.dt_s).max(0.0);
        let k = (u.floor() as usize).min(last);
        if k == last {
            return self.positions[last];
        }
        let f = u - k as f64;
        let (a, b) = (self.positions[k], self.positions[k + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    /// Input applied at time `t`, zero after the end.
    pub fn input_at(&self, t: f64) -> [f64; 2] {
        let k = (t / self.dt_s).max(0.0).floor() as usize;
        self.inputs.get(k).copied().unwrap_or([0.0, 0.0])
    }

    /// CSV with columns `k,t,x_p,y_p,u_px,u_py`; the last row has zero input.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,t,x_p,y_p,u_px,u_py")?;
        for (k, p) in self.positions.iter().enumerate() {
            let u = self.inputs.get(k).copied().unwrap_or([0.0, 0.0]);
            writeln!(w, "{k},{},{},{},{},{}", k as f64 * self.dt_s, p[0], p[1], u[0], u[1])?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Euler consistency, speed box, raster avoidance and terminal goal
    /// membership, step by step.
    pub fn check(&self, raster: &Raster, goal: &Rect, speed_max: f64) -> std::result::Result<(), String> {
        if !self.feasible {
            return Err("plan is infeasible".into());
        }
        if self.positions.len() != self.horizon + 1 || self.inputs.len() != self.horizon {
            return Err("sequence lengths do not match the horizon".into());
        }
        for (k, p) in self.positions.iter().enumerate() {
            match raster.cell_of(p[0], p[1]) {
                Some((ix, iy)) if !raster.is_blocked(ix, iy) => {}
                _ => return Err(format!("step {k} at {p:?} is blocked or outside the raster")),
            }
            if let Some(u) = self.inputs.get(k) {
                if u[0].abs() > speed_max * (1.0 + 1e-9) || u[1].abs() > speed_max * (1.0 + 1e-9) {
                    return Err(format!("step {k} input {u:?} exceeds the speed box"));
                }
                let q = self.positions[k + 1];
                for c in 0..2 {
                    if (p[c] + self.dt_s * u[c] - q[c]).abs() > 1e-9 {
                        return Err(format!("step {k} breaks p(k+1) = p(k) + dt u(k)"));
                    }
                }
            }
        }
        let end = self.positions[self.horizon];
        if !goal.contains(end[0], end[1]) {
            return Err("final position outside the goal".into());
        }
        Ok(())
    }
}

/// Planner time step for unit-cell moves at full speed: `Δt = h / u_max`.
pub fn lattice_dt(h: f64, speed_max: f64) -> f64 {
    h / speed_max
}

/// Exact minimizer of `Σ_{k=0..T} ||p(k) − ref||²` over king-move paths of
/// length `T` on the free raster cells, ending in the goal. Each move shifts
/// by at most one cell per axis, so the speed box is `h/Δt`.
pub fn plan(w: &Workspace, blocked: &Raster, p0: (f64, f64), dt: f64, horizon: usize) -> Result<PlanTrajectory> {
    if !(dt > 0.0) {
        return usage("planner dt must be positive");
    }
    let (nx, ny) = (blocked.nx(), blocked.ny());
    let (ax, ay) = (&blocked.spec.axes[0], &blocked.spec.axes[1]);
    let Some((sx, sy)) = blocked.cell_of(p0.0, p0.1) else {
        return domain(format!("start {p0:?} outside the raster"));
    };
    if blocked.is_blocked(sx, sy) {
        return Err(Error::Infeasible(format!("start {p0:?} lies in the augmented obstacles")));
    }
    let n = nx * ny;
    let stage: Vec<f64> = (0..n)
        .map(|k| {
            let (dx, dy) = (ax.coord(k / ny) - w.reference_m.0, ay.coord(k % ny) - w.reference_m.1);
            dx * dx + dy * dy
        })
        .collect();
    // cost-to-go per step; next[k] = best successor of cell k at step t
    let mut to_go: Vec<f64> = (0..n)
        .map(|k| {
            let free = !blocked.blocked[k];
            if free && w.goal.contains(ax.coord(k / ny), ay.coord(k % ny)) {
                stage[k]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut choice: Vec<Vec<u32>> = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut cur = vec![f64::INFINITY; n];
        let mut arg = vec![u32::MAX; n];
        for ix in 0..nx {
            for iy in 0..ny {
                let k = ix * ny + iy;
                if blocked.blocked[k] {
                    continue;
                }
                let mut best = f64::INFINITY;
                let mut best_k = u32::MAX;
                for jx in ix.saturating_sub(1)..=(ix + 1).min(nx - 1) {
                    for jy in iy.saturating_sub(1)..=(iy + 1).min(ny - 1) {
                        let j = jx * ny + jy;
                        if to_go[j] < best {
                            best = to_go[j];
                            best_k = j as u32;
                        }
                    }
                }
                if best_k != u32::MAX {
                    cur[k] = stage[k] + best;
                    arg[k] = best_k;
                }
            }
        }
        to_go = cur;
        choice.push(arg);
    }
    let start = sx * ny + sy;
    if !to_go[start].is_finite() {
        return Ok(PlanTrajectory::infeasible(dt, horizon));
    }
    let mut cells = vec![start];
    for step in choice.iter().rev() {
        cells.push(step[*cells.last().expect("nonempty") as usize] as usize);
    }
    let positions: Vec<[f64; 2]> = cells.iter().map(|&k| [ax.coord(k / ny), ay.coord(k % ny)]).collect();
    let inputs = positions
        .windows(2)
        .map(|p| [(p[1][0] - p[0][0]) / dt, (p[1][1] - p[0][1]) / dt])
        .collect();
    Ok(PlanTrajectory {
        dt_s: dt,
        horizon,
        feasible: true,
        positions,
        inputs,
        cost: to_go[start],
        attempts: vec![horizon],
    })
}

/// Plans with `T = 1, 2, 4, …` and finally `T_max`, returning the first
/// feasible result together with every horizon tried.
pub fn plan_with_growth(w: &Workspace, blocked: &Raster, p0: (f64, f64), dt: f64, t_max: usize) -> Result<PlanTrajectory> {
    if t_max < 1 {
        return usage("horizon cap must be at least 1");
    }
    let mut attempts = Vec::new();
    let mut t = 1;
    loop {
        attempts.push(t);
        let mut p = plan(w, blocked, p0, dt, t)?;
        if p.feasible || t == t_max {
            p.attempts = attempts;
            return Ok(p);
        }
        t = (t * 2).min(t_max);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws() -> Workspace {
        Workspace {
            x_range_m: (0.0, 1.0),
            y_range_m: (0.0, 1.0),
            obstacles: vec![Rect::new((0.45, 0.55), (0.0, 0.6))],
            goal: Rect::new((0.8, 1.0), (0.0, 0.2)),
            reference_m: (0.9, 0.1),
            footprint_radius_m: 0.0,
            wall_rows: false,
        }
    }

    #[test]
    fn rasterize_marks_overlapping_cells() {
        let r = ws().rasterize(0.1).unwrap();
        // cells centered at 0.4 and 0.6 touch the box edges at 0.45 / 0.55
        assert!(r.is_blocked(5, 0));
        assert!(r.is_blocked(4, 6));
        assert!(r.is_blocked(6, 6));
        assert!(!r.is_blocked(3, 0));
        assert!(!r.is_blocked(5, 7));
    }

    #[test]
    fn footprint_dilates() {
        let mut w = ws();
        w.footprint_radius_m = 0.1;
        let r = w.rasterize(0.1).unwrap();
        assert!(r.is_blocked(3, 0));
        assert!(r.is_blocked(5, 7));
        assert!(!r.is_blocked(2, 0));
    }

    #[test]
    fn goal_overlap_is_rejected() {
        let mut w = ws();
        w.obstacles.push(Rect::new((0.85, 0.95), (0.05, 0.1)));
        assert!(matches!(w.rasterize(0.1), Err(Error::Validation { .. })));
    }

    #[test]
    fn plan_at_start_in_goal_with_zero_horizon() {
        let w = ws();
        let r = Raster::empty(w.raster_spec(0.1).unwrap());
        let p = plan(&w, &r, (0.9, 0.1), 1.0, 0).unwrap();
        assert!(p.feasible);
        assert_eq!(p.positions, vec![[0.9, 0.1]]);
        assert!(p.inputs.is_empty());
    }

    #[test]
    fn plan_goes_around_the_wall() {
        let w = ws();
        let r = w.rasterize(0.1).unwrap();
        let p = plan_with_growth(&w, &r, (0.1, 0.1), 0.5, 64).unwrap();
        assert!(p.feasible);
        p.check(&r, &w.goal, 0.2).unwrap();
        assert_eq!(p.attempts, vec![1, 2, 4, 8, 16]);
        assert!(p.positions.iter().any(|q| q[1] > 0.6));
    }

    #[test]
    fn growth_stops_at_cap() {
        let mut w = ws();
        w.obstacles[0].y_m = (0.0, 1.0);
        let r = w.rasterize(0.1).unwrap();
        let p = plan_with_growth(&w, &r, (0.1, 0.1), 0.5, 20).unwrap();
        assert!(!p.feasible);
        assert_eq!(p.attempts, vec![1, 2, 4, 8, 16, 20]);
    }
}
