//! Grid solver for the tracking game's variational inequality, the TEB level
//! and sets derived from the converged value function, and the minimax safe
//! controller.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{AffineGame, AffineTerms, InputBox, MAX_DIM};
use crate::error::{domain, usage, Error, Result};
use crate::grid::{Axis, GridSpec, ScalarField};
use crate::scheme::NodeModel;

pub use crate::dynamics::stage_cost;

/// How a sweep over grid nodes is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Rayon data-parallel sweeps (sequential when built without `parallel`).
    #[default]
    Parallel,
    Sequential,
}

/// Numerical Hamiltonian used by the sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NumericalScheme {
    /// Min–max over inputs of the upwinded advection `Σ gᵢ⁺D⁺ + gᵢ⁻D⁻`.
    #[default]
    Upwind,
    /// `H(p̄) + Σ αᵢ(p⁺ᵢ − p⁻ᵢ)/2` with `αᵢ = max |gᵢ|` at the node.
    LaxFriedrichs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Stop once the largest node update of a sweep falls below this.
    pub tol: f64,
    pub max_iters: usize,
    pub cfl: f64,
    /// Consecutive residual increases that count as divergence.
    pub divergence_window: usize,
    /// Points per input axis for the outer minimization lattice.
    pub lattice_per_axis: usize,
    /// Points per tracker-input axis inside the sweeps (2 = box vertices).
    pub sweep_lattice_per_axis: usize,
    pub scheme: NumericalScheme,
    pub execution: Execution,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 20_000,
            cfl: 0.5,
            divergence_window: 50,
            lattice_per_axis: 5,
            sweep_lattice_per_axis: 2,
            scheme: NumericalScheme::Upwind,
            execution: Execution::Parallel,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Validation { field: format!("solver.{field}"), message: message.into() })
        };
        if !(self.tol > 0.0) {
            return bad("tol", "must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be at least 1");
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return bad("cfl", "must lie in (0, 1]");
        }
        if self.lattice_per_axis < 2 {
            return bad("lattice_per_axis", "must be at least 2");
        }
        if self.sweep_lattice_per_axis < 2 {
            return bad("sweep_lattice_per_axis", "must be at least 2");
        }
        Ok(())
    }
}

/// Converged (or best-effort) value function plus solver bookkeeping.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    pub field: ScalarField,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub settings: SolverSettings,
    /// Pseudo-time step used by every sweep.
    pub dt: f64,
    pub residual_history: Vec<f64>,
    /// Smallest per-node change over all sweeps; negative values would break
    /// the pseudo-time monotonicity of the iterates.
    pub min_step_change: f64,
    /// Largest `Σ αᵢ/hᵢ` over the grid.
    pub max_dissipation_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ValueSidecar {
    converged: bool,
    iterations: usize,
    final_residual: f64,
    settings: SolverSettings,
    dt: f64,
    min_step_change: f64,
    max_dissipation_rate: f64,
}

impl ValueFunction {
    /// Writes `<stem>.field`, `<stem>.json` and `<stem>_residuals.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.field.save(dir.join(format!("{stem}.field")))?;
        let side = ValueSidecar {
            converged: self.converged,
            iterations: self.iterations,
            final_residual: self.final_residual,
            settings: self.settings.clone(),
            dt: self.dt,
            min_step_change: self.min_step_change,
            max_dissipation_rate: self.max_dissipation_rate,
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        let mut csv = String::from("iteration,residual\n");
        for (i, r) in self.residual_history.iter().enumerate() {
            csv.push_str(&format!("{},{:e}\n", i + 1, r));
        }
        std::fs::write(dir.join(format!("{stem}_residuals.csv")), csv)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let field = ScalarField::load(dir.join(format!("{stem}.field")))?;
        let side: ValueSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let csv = std::fs::read_to_string(dir.join(format!("{stem}_residuals.csv")))?;
        let residual_history = csv
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Validation { field: stem.into(), message: format!("bad residual row `{l}`") })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            field,
            converged: side.converged,
            iterations: side.iterations,
            final_residual: side.final_residual,
            settings: side.settings,
            dt: side.dt,
            residual_history,
            min_step_change: side.min_step_change,
            max_dissipation_rate: side.max_dissipation_rate,
        })
    }

    pub fn value_at(&self, r: &[f64]) -> Result<f64> {
        self.field.interpolate(r)
    }
}

/// Scalar test game `ṙ = a·r + b·u_s + u_p` with cost `|r|`.
#[derive(Debug, Clone)]
pub struct ScalarGame {
    pub drift_gain: f64,
    pub tracker_gain: f64,
    pub tracker_box: InputBox,
    pub planner_box: InputBox,
}

impl AffineGame for ScalarGame {
    fn dim(&self) -> usize {
        1
    }

    fn tracker_box(&self) -> &InputBox {
        &self.tracker_box
    }

    fn planner_box(&self) -> &InputBox {
        &self.planner_box
    }

    fn dependent_axes(&self) -> Vec<usize> {
        vec![0]
    }

    fn terms(&self, r: &[f64]) -> Result<AffineTerms> {
        let mut t = AffineTerms::zeros(1);
        t.drift[0] = self.drift_gain * r[0];
        if self.tracker_box.dim() > 0 {
            t.tracker[0][0] = self.tracker_gain;
        }
        if self.planner_box.dim() > 0 {
            t.planner[0][0] = 1.0;
        }
        Ok(t)
    }
}

#[inline]
fn dot(a: &[f64; MAX_DIM], p: &[f64], dim: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..dim {
        s += a[i] * p[i];
    }
    s
}

/// `max_{u_p, e} p·g` for a fixed tracker input.
fn inner_max(t: &AffineTerms, planner: &InputBox, p: &[f64], us: &[f64]) -> f64 {
    let dim = t.dim;
    let mut v = dot(&t.drift, p, dim);
    for (k, u) in us.iter().enumerate() {
        v += dot(&t.tracker[k], p, dim) * u;
    }
    for (k, &(lo, hi)) in planner.0.iter().enumerate() {
        let c = dot(&t.planner[k], p, dim);
        v += (c * lo).max(c * hi);
    }
    for ch in &t.channels[..t.n_channels] {
        let c = dot(&ch.dir, p, dim);
        v += c * ch.center + c.abs() * ch.radius;
    }
    v
}

/// Closed-form `min_{u_s} max_{u_p, e} p·g` (every term is affine and boxes
/// are products, so each input axis is optimized at a vertex independently).
#[inline]
fn hamiltonian_closed_form(t: &AffineTerms, tracker: &InputBox, planner: &InputBox, p: &[f64]) -> f64 {
    let dim = t.dim;
    let mut v = dot(&t.drift, p, dim);
    for (k, &(lo, hi)) in tracker.0.iter().enumerate() {
        let c = dot(&t.tracker[k], p, dim);
        v += (c * lo).min(c * hi);
    }
    for (k, &(lo, hi)) in planner.0.iter().enumerate() {
        let c = dot(&t.planner[k], p, dim);
        v += (c * lo).max(c * hi);
    }
    for ch in &t.channels[..t.n_channels] {
        let c = dot(&ch.dir, p, dim);
        v += c * ch.center + c.abs() * ch.radius;
    }
    v
}

fn infinity_norm(u: &[f64]) -> f64 {
    u.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Lattice minimization with the deterministic tie rule: smallest ∞-norm,
/// then lexicographic.
fn argmin_over_lattice(t: &AffineTerms, tracker: &InputBox, planner: &InputBox, p: &[f64], per_axis: usize) -> (f64, Vec<f64>) {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for us in tracker.lattice(per_axis) {
        let v = inner_max(t, planner, p, &us);
        let replace = match &best {
            None => true,
            Some((bv, bu)) => {
                let tie = 1e-12 * (1.0 + bv.abs());
                if v < bv - tie {
                    true
                } else if v <= bv + tie {
                    let (na, nb) = (infinity_norm(&us), infinity_norm(bu));
                    na < nb || (na == nb && us.partial_cmp(bu) == Some(std::cmp::Ordering::Less))
                } else {
                    false
                }
            }
        };
        if replace {
            best = Some((v, us));
        }
    }
    best.expect("lattice is never empty")
}

/// `min_{u_s} max_{u_p, e} ∇V·g` at `r`, with the minimizing tracker input.
pub fn hamiltonian<G: AffineGame + ?Sized>(r: &[f64], grad: &[f64], game: &G, lattice_per_axis: usize) -> Result<(f64, Vec<f64>)> {
    if grad.len() != game.dim() || r.len() != game.dim() {
        return usage(format!("state/gradient dims {}/{} for a {}-D game", r.len(), grad.len(), game.dim()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return usage("gradient must be finite");
    }
    let t = game.terms(r)?;
    Ok(argmin_over_lattice(&t, game.tracker_box(), game.planner_box(), grad, lattice_per_axis))
}

/// `Σ_k max(|c·lo|, |c·hi|)` per state row: the bound on `|gᵢ|` at a node.
fn dissipation(t: &AffineTerms, tracker: &InputBox, planner: &InputBox) -> [f64; MAX_DIM] {
    let mut a = [0.0; MAX_DIM];
    for i in 0..t.dim {
        let mut s = t.drift[i].abs();
        for (k, &(lo, hi)) in tracker.0.iter().enumerate() {
            let c = t.tracker[k][i];
            s += (c * lo).abs().max((c * hi).abs());
        }
        for (k, &(lo, hi)) in planner.0.iter().enumerate() {
            let c = t.planner[k][i];
            s += (c * lo).abs().max((c * hi).abs());
        }
        for ch in &t.channels[..t.n_channels] {
            let c = ch.dir[i];
            s += (c * ch.envelope.0).abs().max((c * ch.envelope.1).abs());
        }
        a[i] = s;
    }
    a
}

struct SweepContext<'a> {
    dim: usize,
    shape: Vec<usize>,
    strides: Vec<usize>,
    spacing: Vec<f64>,
    periodic: Vec<bool>,
    /// Strides into the dependent-axes table, zero for other axes.
    table_strides: Vec<usize>,
    terms: Vec<AffineTerms>,
    /// `αᵢ` per table entry.
    alpha: Vec<[f64; MAX_DIM]>,
    models: Vec<NodeModel>,
    scheme: NumericalScheme,
    tracker: &'a InputBox,
    planner: &'a InputBox,
    stage: Vec<f64>,
    dt: f64,
}

impl SweepContext<'_> {
    /// Updates one row along the last axis; returns `(max |ΔV|, min ΔV)`.
    fn sweep_row(&self, row: usize, v: &[f64], out: &mut [f64]) -> (f64, f64) {
        let dim = self.dim;
        let last = dim - 1;
        let n_last = self.shape[last];
        let mut idx = [0usize; MAX_DIM];
        let mut rem = row;
        for a in (0..last).rev() {
            idx[a] = rem % self.shape[a];
            rem /= self.shape[a];
        }
        let base = row * n_last;
        let mut table_base = 0;
        for a in 0..last {
            table_base += idx[a] * self.table_strides[a];
        }
        let mut max_res: f64 = 0.0;
        let mut min_change = f64::INFINITY;
        let mut pbar = [0.0; MAX_DIM];
        let mut diss = [0.0; MAX_DIM];
        let mut dm = [0.0; MAX_DIM];
        let mut dp = [0.0; MAX_DIM];
        for j in 0..n_last {
            idx[last] = j;
            let f = base + j;
            let vf = v[f];
            for a in 0..dim {
                let s = self.strides[a];
                let n = self.shape[a];
                let i = idx[a];
                let h = self.spacing[a];
                let (left, right) = if self.periodic[a] {
                    let fm = if i == 0 { f + (n - 1) * s } else { f - s };
                    let fp = if i + 1 == n { f - (n - 1) * s } else { f + s };
                    ((vf - v[fm]) / h, (v[fp] - vf) / h)
                } else if i == 0 {
                    // off-grid neighbor: max(V, extrapolated cost) keeps the stencil monotone
                    let ghost = vf.max(2.0 * self.stage[f] - self.stage[f + s]);
                    ((vf - ghost) / h, (v[f + s] - vf) / h)
                } else if i + 1 == n {
                    let ghost = vf.max(2.0 * self.stage[f] - self.stage[f - s]);
                    ((vf - v[f - s]) / h, (ghost - vf) / h)
                } else {
                    ((vf - v[f - s]) / h, (v[f + s] - vf) / h)
                };
                dm[a] = left;
                dp[a] = right;
                pbar[a] = 0.5 * (left + right);
                diss[a] = 0.5 * (right - left);
            }
            let k = table_base + j * self.table_strides[last];
            let ham = match self.scheme {
                NumericalScheme::Upwind => self.models[k].hamiltonian(&dm[..dim], &dp[..dim]),
                NumericalScheme::LaxFriedrichs => {
                    let alpha = &self.alpha[k];
                    let mut h = hamiltonian_closed_form(&self.terms[k], self.tracker, self.planner, &pbar[..dim]);
                    for a in 0..dim {
                        h += alpha[a] * diss[a];
                    }
                    h
                }
            };
            let next = (vf + self.dt * ham).max(self.stage[f]);
            out[j] = next;
            let change = next - vf;
            max_res = max_res.max(change.abs());
            min_change = min_change.min(change);
        }
        (max_res, min_change)
    }

    fn sweep(&self, v: &[f64], out: &mut [f64], execution: Execution) -> (f64, f64) {
        let n_last = self.shape[self.dim - 1];
        let merge = |a: (f64, f64), b: (f64, f64)| (a.0.max(b.0), a.1.min(b.1));
        let identity = (0.0, f64::INFINITY);
        match execution {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                out.par_chunks_mut(n_last)
                    .enumerate()
                    .map(|(row, o)| self.sweep_row(row, v, o))
                    .reduce(|| identity, merge)
            }
            _ => out
                .chunks_mut(n_last)
                .enumerate()
                .map(|(row, o)| self.sweep_row(row, v, o))
                .fold(identity, merge),
        }
    }
}

/// Marches `V ← max(l, V + Δt·Ĥ)` from `V = l` with a monotone numerical
/// Hamiltonian (see [`NumericalScheme`]) until the largest node update drops below
/// `settings.tol`.
pub fn solve_vi<G: AffineGame + ?Sized>(game: &G, spec: &GridSpec, settings: &SolverSettings) -> Result<ValueFunction> {
    settings.validate()?;
    let dim = game.dim();
    if spec.ndim() != dim {
        return usage(format!("grid has {} axes, game has {dim}", spec.ndim()));
    }
    if dim > MAX_DIM {
        return usage(format!("at most {MAX_DIM} relative dimensions are supported"));
    }
    let shape = spec.shape();
    let strides = spec.strides().to_vec();
    let spacing: Vec<f64> = (0..dim).map(|a| spec.spacing(a)).collect();
    let periodic: Vec<bool> = spec.axes.iter().map(|a| a.periodic).collect();

    // terms only vary along the dependent axes: tabulate them there once
    let mut dep = game.dependent_axes();
    dep.sort_unstable();
    dep.dedup();
    let mut table_strides = vec![0usize; dim];
    let mut table_len = 1;
    for &a in dep.iter().rev() {
        table_strides[a] = table_len;
        table_len *= shape[a];
    }
    let mut terms = Vec::with_capacity(table_len);
    let mut point = vec![0.0; dim];
    let mut tidx = vec![0usize; dep.len()];
    for k in 0..table_len {
        let mut rem = k;
        for (slot, &a) in dep.iter().enumerate().rev() {
            tidx[slot] = rem % shape[a];
            rem /= shape[a];
        }
        for a in 0..dim {
            point[a] = match dep.iter().position(|&d| d == a) {
                Some(slot) => spec.axes[a].coord(tidx[slot]),
                None => 0.0,
            };
        }
        let t = game.terms(&point)?;
        if t.dim != dim {
            return usage("game terms report the wrong dimension");
        }
        terms.push(t);
    }
    let tracker = game.tracker_box();
    let planner = game.planner_box();
    let alpha: Vec<[f64; MAX_DIM]> = terms.iter().map(|t| dissipation(t, tracker, planner)).collect();
    let max_rate = alpha
        .iter()
        .map(|a| (0..dim).map(|i| a[i] / spacing[i]).sum::<f64>())
        .fold(0.0, f64::max);
    if !max_rate.is_finite() {
        return Err(Error::Numerical("non-finite dissipation coefficients".into()));
    }
    let dt = if max_rate > 0.0 { settings.cfl / max_rate } else { 1.0 };

    if tracker.dim() > 2 {
        return usage("at most two tracker inputs are supported");
    }
    let models: Vec<NodeModel> = match settings.scheme {
        NumericalScheme::Upwind => terms
            .iter()
            .map(|t| NodeModel::new(t, tracker, planner, settings.sweep_lattice_per_axis))
            .collect(),
        NumericalScheme::LaxFriedrichs => Vec::new(),
    };
    let stage: Vec<f64> = (0..spec.len()).map(|f| game.stage_cost(&spec.coords_of(f))).collect();
    let ctx = SweepContext {
        dim,
        shape,
        strides,
        spacing,
        periodic,
        table_strides,
        terms,
        alpha,
        models,
        scheme: settings.scheme,
        tracker,
        planner,
        stage,
        dt,
    };

    let mut v = ctx.stage.clone();
    let mut next = vec![0.0; v.len()];
    let mut history = Vec::new();
    let mut min_change = f64::INFINITY;
    let mut rising = 0usize;
    let mut converged = false;
    for iter in 0..settings.max_iters {
        let (res, lo) = ctx.sweep(&v, &mut next, settings.execution);
        std::mem::swap(&mut v, &mut next);
        if !res.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value after {} sweeps (max Σα/h = {max_rate:.4e}, dt = {dt:.4e})",
                iter + 1
            )));
        }
        min_change = min_change.min(lo);
        if history.last().is_some_and(|&prev| res > prev) {
            rising += 1;
        } else {
            rising = 0;
        }
        history.push(res);
        if rising >= settings.divergence_window {
            return Err(Error::Numerical(format!(
                "residual grew for {rising} consecutive sweeps (now {res:.3e}); dissipation max Σα/h = {max_rate:.4e}, dt = {dt:.4e}"
            )));
        }
        if res < settings.tol {
            converged = true;
            break;
        }
    }
    let iterations = history.len();
    let final_residual = history.last().copied().unwrap_or(0.0);
    if !converged {
        log::warn!("value iteration stopped at max_iters={iterations} with residual {final_residual:.3e}");
    }
    Ok(ValueFunction {
        field: ScalarField::new(spec.clone(), v)?,
        converged,
        iterations,
        final_residual,
        settings: settings.clone(),
        dt,
        residual_history: history,
        min_step_change: min_change,
        max_dissipation_rate: max_rate,
    })
}

/// Nodes of `axis` whose coordinate lies in `range` (small slack included).
fn nodes_in_range(axis: &Axis, range: (f64, f64)) -> Vec<usize> {
    let eps = 1e-9 * (1.0 + axis.hi.abs().max(axis.lo.abs()));
    (0..axis.n)
        .filter(|&i| {
            let c = axis.coord(i);
            c >= range.0 - eps && c <= range.1 + eps
        })
        .collect()
}

/// `max over y-nodes in range of (min over all other axes of V)`.
pub fn compute_vbar(v: &ValueFunction, y_axis: usize, y_range: (f64, f64)) -> Result<f64> {
    let spec = v.field.spec();
    if y_axis >= spec.ndim() {
        return usage(format!("y axis {y_axis} outside a {}-D grid", spec.ndim()));
    }
    if !(y_range.0 <= y_range.1) {
        return usage(format!("empty y range {y_range:?}"));
    }
    let nodes = nodes_in_range(&spec.axes[y_axis], y_range);
    if nodes.is_empty() {
        return usage(format!("y range {y_range:?} contains no grid nodes"));
    }
    let per_y: Vec<f64> = if spec.ndim() == 1 {
        v.field.values().to_vec()
    } else {
        v.field.project_min(&[y_axis])?.into_values()
    };
    Ok(nodes.iter().map(|&i| per_y[i]).fold(f64::NEG_INFINITY, f64::max))
}

/// The tracking error bound `{r : V(r) ≤ V̲}` with its per-`y` position projections.
#[derive(Debug, Clone)]
pub struct Teb {
    pub value: ValueFunction,
    pub level: f64,
    pub y_axis: usize,
    pub y_range: (f64, f64),
    /// Some projection reaches the edge of the position axes.
    pub truncated: bool,
    /// `min V` over everything but `(x_r, y_r, y)`, on those three axes.
    position_min: ScalarField,
}

/// A 2-D boolean raster over the `(x_r, y_r)` axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub x_axis: Axis,
    pub y_axis: Axis,
    /// Row-major `[ix * ny + iy]`.
    pub mask: Vec<bool>,
}

impl Projection {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn area(&self) -> f64 {
        self.count() as f64 * self.x_axis.spacing() * self.y_axis.spacing()
    }

    pub fn is_member(&self, ix: usize, iy: usize) -> bool {
        self.mask[ix * self.y_axis.n + iy]
    }

    /// Position offsets of member cells.
    pub fn offsets(&self) -> Vec<(f64, f64)> {
        let ny = self.y_axis.n;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(k, _)| (self.x_axis.coord(k / ny), self.y_axis.coord(k % ny)))
            .collect()
    }

    pub fn union(&self, other: &Projection) -> Projection {
        Projection {
            x_axis: self.x_axis.clone(),
            y_axis: self.y_axis.clone(),
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// True when any member sits on the outer ring of the raster.
    pub fn touches_edge(&self) -> bool {
        let (nx, ny) = (self.x_axis.n, self.y_axis.n);
        (0..nx).any(|ix| (0..ny).any(|iy| (ix == 0 || iy == 0 || ix + 1 == nx || iy + 1 == ny) && self.is_member(ix, iy)))
    }
}

/// Builds the TEB at level `vbar` and checks that every projection for `y`
/// in `y_range` is nonempty. A projection reaching the outer ring of the
/// position axes marks the TEB as truncated: the value there is pinned by
/// the grid boundary and the sublevel set means little. So does a level at
/// or above the inscribed radius of the position box, since the true set may
/// then extend past the grid. Projections of a
/// truncated TEB fall back to the outer bound `{|(x_r, y_r)| ≤ V̲}`, which
/// holds because `V ≥ l` with `l` the position distance.
pub fn extract_teb(v: ValueFunction, vbar: f64, y_axis: usize, y_range: (f64, f64)) -> Result<Teb> {
    if !vbar.is_finite() {
        return usage("TEB level must be finite");
    }
    let spec = v.field.spec().clone();
    if spec.ndim() < 3 || y_axis < 2 || y_axis >= spec.ndim() {
        return usage("the TEB needs two position axes followed by a y axis");
    }
    let position_min = if spec.ndim() == 3 { v.field.clone() } else { v.field.project_min(&[0, 1, y_axis])? };
    let inscribed = spec.axes[..2].iter().flat_map(|a| [-a.lo, a.hi]).fold(f64::INFINITY, f64::min);
    let mut teb = Teb { value: v, level: vbar, y_axis, y_range, truncated: vbar >= inscribed, position_min };
    for i in nodes_in_range(&spec.axes[y_axis], y_range) {
        let p = teb.level_projection(i);
        if p.count() == 0 {
            return Err(Error::Infeasible(format!(
                "TEB projection empty at y = {:.4}",
                spec.axes[y_axis].coord(i)
            )));
        }
        teb.truncated |= p.touches_edge();
    }
    if teb.truncated {
        log::warn!("TEB reaches the edge of the position axes; the stored set is truncated");
    }
    Ok(teb)
}

impl Teb {
    pub fn spec(&self) -> &GridSpec {
        self.value.field.spec()
    }

    pub fn y_nodes(&self) -> &Axis {
        &self.spec().axes[self.y_axis]
    }

    /// Projection `𝓑ₑ(y)` at y-node `iy`.
    pub fn projection(&self, iy: usize) -> Projection {
        let mut p = self.level_projection(iy);
        if self.truncated {
            let ny = p.y_axis.n;
            for (k, m) in p.mask.iter_mut().enumerate() {
                *m |= p.x_axis.coord(k / ny).hypot(p.y_axis.coord(k % ny)) <= self.level;
            }
        }
        p
    }

    /// The sublevel set's own projection at y-node `iy`.
    pub fn level_projection(&self, iy: usize) -> Projection {
        let ps = self.position_min.spec();
        let (nx, ny, nyy) = (ps.axes[0].n, ps.axes[1].n, ps.axes[2].n);
        let vals = self.position_min.values();
        let mut mask = Vec::with_capacity(nx * ny);
        for ix in 0..nx {
            for jy in 0..ny {
                mask.push(vals[(ix * ny + jy) * nyy + iy] <= self.level);
            }
        }
        Projection { x_axis: ps.axes[0].clone(), y_axis: ps.axes[1].clone(), mask }
    }

    /// Projection at an arbitrary `y`: the node's own when `y` sits on a
    /// node, else the union of the two bracketing nodes.
    pub fn projection_at(&self, y: f64) -> Result<Projection> {
        let axis = self.y_nodes();
        if !axis.contains(y) {
            return domain(format!("y = {y} outside the TEB table [{}, {}]", axis.lo, axis.hi));
        }
        let u = ((y - axis.lo) / axis.spacing()).clamp(0.0, (axis.n - 1) as f64);
        let lo = u.floor() as usize;
        if (u - lo as f64).abs() < 1e-9 || lo + 1 >= axis.n {
            return Ok(self.projection(lo.min(axis.n - 1)));
        }
        if (u - (lo + 1) as f64).abs() < 1e-9 {
            return Ok(self.projection(lo + 1));
        }
        Ok(self.projection(lo).union(&self.projection(lo + 1)))
    }

    pub fn contains(&self, r: &[f64]) -> Result<bool> {
        Ok(self.value.value_at(r)? <= self.level)
    }

    pub fn document(&self) -> TebDocument {
        let axis = self.y_nodes();
        TebDocument {
            level: self.level,
            y_axis: self.y_axis,
            y_range: self.y_range,
            truncated: self.truncated,
            projections: (0..axis.n)
                .map(|i| {
                    let p = self.projection(i);
                    ProjectionSummary {
                        y: axis.coord(i),
                        cells: p.count(),
                        area_m2: p.area(),
                        offsets: p.offsets().into_iter().map(|(a, b)| [a, b]).collect(),
                    }
                })
                .collect(),
        }
    }

    /// Rebuilds a TEB from a saved value function and its document.
    pub fn from_document(value: ValueFunction, doc: &TebDocument) -> Result<Self> {
        extract_teb(value, doc.level, doc.y_axis, doc.y_range)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TebDocument {
    pub level: f64,
    pub y_axis: usize,
    pub y_range: (f64, f64),
    #[serde(default)]
    pub truncated: bool,
    pub projections: Vec<ProjectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub y: f64,
    pub cells: usize,
    pub area_m2: f64,
    pub offsets: Vec<[f64; 2]>,
}

/// Minimax feedback at `r`: the Hamiltonian's minimizer at the value
/// gradient.
pub fn safe_control<G: AffineGame + ?Sized>(v: &ValueFunction, r: &[f64], game: &G) -> Result<Vec<f64>> {
    let spec = v.field.spec();
    if r.len() != spec.ndim() || !spec.contains(r) {
        return domain(format!("relative state {r:?} outside the value grid"));
    }
    let grad = v.field.gradient(r)?;
    Ok(hamiltonian(r, &grad, game, v.settings.lattice_per_axis)?.1)
}

/// Worst-case `∇V·g` at `r` under input `us`: the quantity the safe
/// controller keeps non-positive on the TEB boundary.
pub fn worst_case_rate<G: AffineGame + ?Sized>(v: &ValueFunction, r: &[f64], us: &[f64], game: &G) -> Result<f64> {
    let grad = v.field.gradient(r)?;
    let t = game.terms(r)?;
    Ok(inner_max(&t, game.planner_box(), &grad, us))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(a: f64) -> ScalarGame {
        ScalarGame {
            drift_gain: -1.0,
            tracker_gain: 0.0,
            tracker_box: InputBox(vec![]),
            planner_box: InputBox(vec![(-a, a)]),
        }
    }

    fn line(n: usize) -> GridSpec {
        GridSpec::new(vec![Axis::new("r", -1.0, 1.0, n)]).unwrap()
    }

    #[test]
    fn stage_cost_examples() {
        assert_eq!(stage_cost(&[0.0, 0.0, 1.0]), 0.0);
        assert_eq!(stage_cost(&[3.0, 4.0, 0.2, -1.0]), 5.0);
        assert_eq!(stage_cost(&[3.0, 4.0, 9.0, 9.0]), stage_cost(&[3.0, 4.0, -2.0, 0.0]));
    }

    #[test]
    fn hamiltonian_zero_gradient() {
        let g = ScalarGame {
            drift_gain: 2.0,
            tracker_gain: 1.0,
            tracker_box: InputBox(vec![(-1.0, 1.0)]),
            planner_box: InputBox(vec![(-0.5, 0.5)]),
        };
        let (v, u) = hamiltonian(&[0.3], &[0.0], &g, 5).unwrap();
        assert_eq!(v, 0.0);
        // every input ties; the smallest one wins
        assert_eq!(u, vec![0.0]);
    }

    #[test]
    fn hamiltonian_sign_logic() {
        let g = ScalarGame {
            drift_gain: 0.0,
            tracker_gain: 1.0,
            tracker_box: InputBox(vec![(-1.0, 1.0)]),
            planner_box: InputBox(vec![(-0.5, 0.5)]),
        };
        let (v, u) = hamiltonian(&[0.0], &[1.0], &g, 5).unwrap();
        assert!((v + 0.5).abs() < 1e-15);
        assert_eq!(u, vec![-1.0]);
        assert!(hamiltonian(&[0.0], &[f64::NAN], &g, 5).is_err());
    }

    #[test]
    fn zero_dynamics_converge_in_one_sweep() {
        let g = ScalarGame {
            drift_gain: 0.0,
            tracker_gain: 0.0,
            tracker_box: InputBox(vec![]),
            planner_box: InputBox(vec![]),
        };
        let spec = line(21);
        let v = solve_vi(&g, &spec, &SolverSettings::default()).unwrap();
        assert_eq!(v.iterations, 1);
        assert!(v.converged);
        for (f, val) in v.field.values().iter().enumerate() {
            assert_eq!(*val, spec.coords_of(f)[0].abs());
        }
    }

    #[test]
    fn contracting_toy_matches_invariant_radius() {
        for a in [0.1, 0.3] {
            let spec = line(201);
            let v = solve_vi(&toy(a), &spec, &SolverSettings { tol: 1e-7, ..Default::default() }).unwrap();
            let hist = &v.residual_history;
            assert!(v.converged, "{} {:?} {:?}", v.iterations, &hist[..5], &hist[hist.len()-5..]);
            let h = spec.spacing(0);
            for (f, val) in v.field.values().iter().enumerate() {
                let r = spec.coords_of(f)[0];
                let exact = r.abs().max(a);
                assert!((val - exact).abs() <= 2.0 * h, "a={a} r={r}: {val} vs {exact}");
            }
            assert!(v.min_step_change >= -1e-12);
        }
    }

    #[test]
    fn safe_control_pushes_toward_origin() {
        let g = ScalarGame {
            drift_gain: -1.0,
            tracker_gain: 1.0,
            tracker_box: InputBox(vec![(-0.2, 0.2)]),
            planner_box: InputBox(vec![(-0.3, 0.3)]),
        };
        let v = solve_vi(&g, &line(201), &SolverSettings { tol: 1e-7, ..Default::default() }).unwrap();
        assert_eq!(safe_control(&v, &[0.6], &g).unwrap(), vec![-0.2]);
        assert_eq!(safe_control(&v, &[-0.6], &g).unwrap(), vec![0.2]);
        assert!(matches!(safe_control(&v, &[1.5], &g), Err(Error::Domain(_))));
    }

    #[test]
    fn vbar_examples() {
        let spec = GridSpec::new(vec![
            Axis::new("x_r", -1.0, 1.0, 5),
            Axis::new("y_r", -1.0, 1.0, 5),
            Axis::new("y", -1.0, 1.0, 3),
        ])
        .unwrap();
        let vf = |field: ScalarField| ValueFunction {
            field,
            converged: true,
            iterations: 1,
            final_residual: 0.0,
            settings: SolverSettings::default(),
            dt: 1.0,
            residual_history: vec![0.0],
            min_step_change: 0.0,
            max_dissipation_rate: 0.0,
        };
        let c = vf(ScalarField::constant(spec.clone(), 2.5).unwrap());
        assert_eq!(compute_vbar(&c, 2, (-1.0, 1.0)).unwrap(), 2.5);
        let l = vf(ScalarField::from_fn(spec.clone(), |p| stage_cost(p)).unwrap());
        assert_eq!(compute_vbar(&l, 2, (-1.0, 1.0)).unwrap(), 0.0);
        assert!(matches!(compute_vbar(&l, 2, (0.2, 0.4)), Err(Error::Usage(_))));
        assert!(matches!(compute_vbar(&l, 2, (0.5, -0.5)), Err(Error::Usage(_))));
    }

    #[test]
    fn teb_of_stage_cost_is_a_disk() {
        let spec = GridSpec::new(vec![
            Axis::new("x_r", -2.0, 2.0, 41),
            Axis::new("y_r", -2.0, 2.0, 41),
            Axis::periodic("psi", -std::f64::consts::PI, std::f64::consts::PI, 4),
            Axis::new("y", -1.0, 1.0, 3),
        ])
        .unwrap();
        let field = ScalarField::from_fn(spec, |p| stage_cost(p)).unwrap();
        let v = ValueFunction {
            field,
            converged: true,
            iterations: 1,
            final_residual: 0.0,
            settings: SolverSettings::default(),
            dt: 1.0,
            residual_history: vec![0.0],
            min_step_change: 0.0,
            max_dissipation_rate: 0.0,
        };
        let teb = extract_teb(v.clone(), 1.0, 3, (-1.0, 1.0)).unwrap();
        for iy in 0..3 {
            let p = teb.projection(iy);
            for ix in 0..41 {
                for jy in 0..41 {
                    let (x, y) = (p.x_axis.coord(ix), p.y_axis.coord(jy));
                    assert_eq!(p.is_member(ix, jy), (x * x + y * y).sqrt() <= 1.0);
                }
            }
        }
        let bigger = extract_teb(v.clone(), 1.5, 3, (-1.0, 1.0)).unwrap();
        let (a, b) = (teb.projection(1), bigger.projection(1));
        assert!(a.mask.iter().zip(&b.mask).all(|(x, y)| !*x || *y));
        assert!(b.count() > a.count());
        assert!(matches!(extract_teb(v.clone(), -0.5, 3, (-1.0, 1.0)), Err(Error::Infeasible(_))));
        assert!(!teb.truncated);
        assert!(extract_teb(v.clone(), 2.5, 3, (-1.0, 1.0)).unwrap().truncated);

        // saturated value: only an edge node reaches the level
        let spec = v.field.spec().clone();
        let pinned = ScalarField::from_fn(spec, |p| if p[0] <= -2.0 && p[1] == 0.0 { 1.0 } else { 1.2 }).unwrap();
        let sat = extract_teb(ValueFunction { field: pinned, ..v.clone() }, 1.0, 3, (-1.0, 1.0)).unwrap();
        assert!(sat.truncated);
        assert_eq!(sat.level_projection(1).count(), 1);
        // an interior set whose level exceeds the inscribed radius of the box
        let high = ScalarField::from_fn(v.field.spec().clone(), |p| if p[0] == 0.0 && p[1] == 0.0 { 2.0 } else { 2.05 }).unwrap();
        let deep = extract_teb(ValueFunction { field: high, ..v.clone() }, 2.0, 3, (-1.0, 1.0)).unwrap();
        assert!(!deep.level_projection(1).touches_edge());
        assert!(deep.truncated);
        let p = sat.projection(1);
        for ix in 0..41 {
            for jy in 0..41 {
                let (x, y) = (p.x_axis.coord(ix), p.y_axis.coord(jy));
                let on_edge = x <= -2.0 && y == 0.0;
                assert_eq!(p.is_member(ix, jy), x.hypot(y) <= 1.0 || on_edge);
            }
        }
    }
}
