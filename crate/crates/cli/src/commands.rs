//! Subcommands. Each stage reads its inputs from the run directory, writes
//! its outputs next to them and records their hashes in the manifest.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use teb_core::control::{write_decisions, ControlDecision};
use teb_core::dynamics::RelativeSystem;
use teb_core::gp::{Band, ConstantBox, UncertaintyDocument, UncertaintyModel};
use teb_core::hji::{Teb, TebDocument, ValueFunction};
use teb_core::planner::{PlanTrajectory, Raster};
use teb_core::sim::{
    build_system, collect_residuals, containment_study, fit_uncertainty, hybrid_config, plan_for, rollout, solve_teb,
    DisturbanceSource, FittedUncertainty, Metrics, Scenario, SimLog, UncertaintyKind,
};
use teb_core::Error;

use sha2::{Digest, Sha256};

use crate::artifacts::{tree_hashes, Manifest};
use crate::{svg, Common};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_INFEASIBLE: u8 = 4;
pub const EXIT_NUMERICAL: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_VALIDATION, format!("{}: {e}", path.display()))
    }

    pub fn json(e: impl Display) -> Self {
        Self::new(EXIT_VALIDATION, format!("json: {e}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Validation { .. } | Error::Usage(_) | Error::Json(_) | Error::Io(_) => EXIT_VALIDATION,
            Error::Infeasible(_) => EXIT_INFEASIBLE,
            Error::Numerical(_) | Error::Domain(_) => EXIT_NUMERICAL,
        };
        Self::new(code, e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

const SCENARIO: &str = "scenario.json";
const OBSERVATIONS: &str = "gp/observations.json";
const UNCERTAINTY: &str = "gp/uncertainty.json";
const CONSERVATIVE: &str = "gp/conservative.json";
const VALUE_STEM: &str = "value";
const TEB: &str = "teb.json";
const OBSTACLES: &str = "obstacles.field";
const AUGMENTED: &str = "augmented.field";
const PLAN_CSV: &str = "plan.csv";
const PLAN_JSON: &str = "plan.json";
const DECISIONS: &str = "decisions.csv";
const METRICS: &str = "metrics.json";
const VERDICT: &str = "verdict.txt";

/// `teb.json`: the level-set document plus the disturbance description it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TebArtifact {
    uncertainty: UncertaintyKind,
    #[serde(flatten)]
    teb: TebDocument,
}

/// `plan.json`: the plan and its planning context.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanArtifact {
    uncertainty: UncertaintyKind,
    arrival_time_s: Option<f64>,
    obstacle_cells: usize,
    augmented_cells: usize,
    plan: PlanTrajectory,
}

fn resolve(c: &Common) -> Res<Scenario> {
    let mut scn = Scenario::load(&c.scenario).map_err(|e| match e {
        Error::Io(io) => Failure::io(&c.scenario, io),
        e => e.into(),
    })?;
    scn.seed = c.seed;
    if let Some(f) = c.grid_scale {
        scn.scale_grid(f)?;
    }
    if let Some(p) = c.p {
        scn.gp.band = Band::Probability(p);
    }
    if let Some(k) = c.sigma_mult {
        scn.gp.band = Band::SigmaMultiplier(k);
    }
    if let Some(n) = c.trials {
        scn.trials = n;
    }
    scn.validate()?;
    Ok(scn)
}

fn kind_of(c: &Common) -> UncertaintyKind {
    if c.uncertainty == "conservative" {
        UncertaintyKind::Conservative
    } else {
        UncertaintyKind::Gp
    }
}

fn source_of(c: &Common) -> DisturbanceSource {
    if c.source == "in-band-worst" {
        DisturbanceSource::InBandWorst
    } else {
        DisturbanceSource::Truth
    }
}

fn ensure_dir(p: &Path) -> Res<()> {
    fs::create_dir_all(p).map_err(|e| Failure::io(p, e))
}

fn require(dir: &Path, rel: &str, producer: &str) -> Res<PathBuf> {
    let p = dir.join(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Failure::new(EXIT_MISSING, format!("{} is missing; run `{producer}` first", p.display())))
    }
}

fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Res<PathBuf> {
    let text = serde_json::to_string_pretty(value).map_err(Failure::json)? + "\n";
    let p = dir.join(rel);
    fs::write(&p, text).map_err(|e| Failure::io(&p, e))?;
    Ok(PathBuf::from(rel))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Res<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_VALIDATION, format!("{}: {e}", path.display())))
}

fn finish(dir: &Path, scenario: &Path, stage: &str, started: Instant, outputs: &[PathBuf]) -> Res<()> {
    let mut m = Manifest::load_or_new(dir, scenario);
    m.record(dir, stage, started.elapsed().as_secs_f64(), outputs)?;
    m.save(dir)?;
    m.verify(dir).map_err(|e| Failure::new(EXIT_NUMERICAL, e))
}

// ---- stages on a run directory ----

fn stage_fit(scn: &Scenario, dir: &Path) -> Res<Vec<PathBuf>> {
    ensure_dir(&dir.join("gp"))?;
    scn.save(dir.join(SCENARIO))?;
    let obs = collect_residuals(scn, scn.gp.samples, scn.seed)?;
    let fit = fit_uncertainty(scn, &obs)?;
    Ok(vec![
        PathBuf::from(SCENARIO),
        write_json(dir, OBSERVATIONS, &obs)?,
        write_json(dir, UNCERTAINTY, &UncertaintyDocument::from(&fit.gp))?,
        write_json(dir, CONSERVATIVE, &fit.conservative)?,
    ])
}

fn load_fit(dir: &Path) -> Res<FittedUncertainty> {
    let u: UncertaintyDocument = read_json(&require(dir, UNCERTAINTY, "fit-gp")?)?;
    let conservative: ConstantBox = read_json(&require(dir, CONSERVATIVE, "fit-gp")?)?;
    Ok(FittedUncertainty { gp: UncertaintyModel::try_from(u)?, conservative })
}

fn load_system(scn: &Scenario, dir: &Path, kind: UncertaintyKind) -> Res<RelativeSystem> {
    Ok(build_system(scn, &load_fit(dir)?, kind)?)
}

fn stage_solve(scn: &Scenario, dir: &Path, kind: UncertaintyKind) -> Res<(Vec<PathBuf>, Teb)> {
    let sys = load_system(scn, dir, kind)?;
    let teb = solve_teb(scn, &sys)?;
    teb.value.save(dir, VALUE_STEM).map_err(Failure::from)?;
    let art = TebArtifact { uncertainty: kind, teb: teb.document() };
    let outputs = vec![
        PathBuf::from(format!("{VALUE_STEM}.field")),
        PathBuf::from(format!("{VALUE_STEM}.json")),
        PathBuf::from(format!("{VALUE_STEM}_residuals.csv")),
        write_json(dir, TEB, &art)?,
    ];
    Ok((outputs, teb))
}

fn load_teb(dir: &Path) -> Res<(UncertaintyKind, Teb)> {
    let art: TebArtifact = read_json(&require(dir, TEB, "solve-hji")?)?;
    require(dir, &format!("{VALUE_STEM}.field"), "solve-hji")?;
    let v = ValueFunction::load(dir, VALUE_STEM)?;
    Ok((art.uncertainty, Teb::from_document(v, &art.teb)?))
}

struct Planned {
    outputs: Vec<PathBuf>,
    augmented: Raster,
    plan: PlanTrajectory,
}

fn stage_plan(scn: &Scenario, dir: &Path, kind: UncertaintyKind, teb: &Teb) -> Res<Planned> {
    let out = plan_for(scn, teb)?;
    out.obstacles.to_field().save(dir.join(OBSTACLES))?;
    out.augmented.to_field().save(dir.join(AUGMENTED))?;
    out.plan.save_csv(dir.join(PLAN_CSV))?;
    let art = PlanArtifact {
        uncertainty: kind,
        arrival_time_s: out.plan.arrival_time(&scn.workspace.goal),
        obstacle_cells: out.obstacles.count(),
        augmented_cells: out.augmented.count(),
        plan: out.plan.clone(),
    };
    let outputs = vec![
        PathBuf::from(OBSTACLES),
        PathBuf::from(AUGMENTED),
        PathBuf::from(PLAN_CSV),
        write_json(dir, PLAN_JSON, &art)?,
    ];
    Ok(Planned { outputs, augmented: out.augmented, plan: out.plan })
}

fn plan_failure(p: &PlanTrajectory) -> Failure {
    let tried = p.attempts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ");
    Failure::new(EXIT_INFEASIBLE, format!("infeasible: no plan reaches the goal at horizons {{{tried}}}"))
}

fn truncation_failure() -> Failure {
    Failure::new(
        EXIT_NUMERICAL,
        "TEB reaches the edge of the position axes; enlarge the grid before trusting the plan",
    )
}

fn load_plan(dir: &Path) -> Res<PlanTrajectory> {
    let art: PlanArtifact = read_json(&require(dir, PLAN_JSON, "plan")?)?;
    if !art.plan.feasible {
        return Err(plan_failure(&art.plan));
    }
    Ok(art.plan)
}

fn save_log(dir: &Path, rel: &str, log: &SimLog) -> Res<PathBuf> {
    log.save_csv(dir.join(rel))?;
    Ok(PathBuf::from(rel))
}

fn decisions_of(log: &SimLog) -> Vec<(f64, ControlDecision)> {
    log.records
        .iter()
        .map(|r| (r.t, ControlDecision { input: r.u, mode: r.mode, value: r.value, relative_state: r.r.clone() }))
        .collect()
}

fn initial_state(scn: &Scenario, p0: [f64; 2]) -> Vec<f64> {
    let mut s = vec![0.0; scn.state_dim()];
    s[0] = p0[0];
    s[1] = p0[1];
    s[2] = scn.start.heading_rad;
    if s.len() == 5 {
        s[3] = scn.start.rates[0];
        s[4] = scn.start.rates[1];
    }
    s
}

fn stage_simulate(scn: &Scenario, dir: &Path, sys: &RelativeSystem, teb: &Teb, plan: &PlanTrajectory) -> Res<(Vec<PathBuf>, SimLog)> {
    ensure_dir(&dir.join("trials"))?;
    let cfg = hybrid_config(scn, teb);
    cfg.validate(&scn.tracker)?;
    let s0 = initial_state(scn, plan.positions[0]);
    let log = rollout(scn, sys, teb, plan, &cfg, DisturbanceSource::Truth, s0, scn.seed, 0)?;
    let mut outputs = vec![save_log(dir, "trials/trial_0000.csv", &log)?];
    let p = dir.join(DECISIONS);
    let f = fs::File::create(&p).map_err(|e| Failure::io(&p, e))?;
    write_decisions(std::io::BufWriter::new(f), &decisions_of(&log))?;
    outputs.push(PathBuf::from(DECISIONS));
    let metrics = Metrics::from_summaries(DisturbanceSource::Truth, scn.seed, teb.level, cfg.margin, &[log.summary.clone()]);
    outputs.push(write_json(dir, METRICS, &metrics)?);
    Ok((outputs, log))
}

// ---- subcommands ----

pub fn fit_gp(c: &Common) -> Res<()> {
    let t = Instant::now();
    let scn = resolve(c)?;
    ensure_dir(&c.out)?;
    let outputs = stage_fit(&scn, &c.out)?;
    finish(&c.out, &c.scenario, "fit-gp", t, &outputs)
}

pub fn solve_hji(c: &Common) -> Res<()> {
    let t = Instant::now();
    let scn = resolve(c)?;
    let (outputs, teb) = stage_solve(&scn, &c.out, kind_of(c))?;
    finish(&c.out, &c.scenario, "solve-hji", t, &outputs)?;
    if teb.truncated {
        log::warn!("the stored TEB is truncated by the grid");
    }
    Ok(())
}

pub fn plan(c: &Common) -> Res<()> {
    let t = Instant::now();
    let scn = resolve(c)?;
    let (kind, teb) = load_teb(&c.out)?;
    let planned = stage_plan(&scn, &c.out, kind, &teb)?;
    finish(&c.out, &c.scenario, "plan", t, &planned.outputs)?;
    if !planned.plan.feasible {
        return Err(plan_failure(&planned.plan));
    }
    if teb.truncated {
        return Err(truncation_failure());
    }
    Ok(())
}

pub fn simulate(c: &Common) -> Res<()> {
    let t = Instant::now();
    let scn = resolve(c)?;
    let (kind, teb) = load_teb(&c.out)?;
    let plan = load_plan(&c.out)?;
    let sys = load_system(&scn, &c.out, kind)?;
    let (outputs, log) = stage_simulate(&scn, &c.out, &sys, &teb, &plan)?;
    finish(&c.out, &c.scenario, "simulate", t, &outputs)?;
    if log.summary.aborted {
        return Err(Failure::new(EXIT_NUMERICAL, "relative state left the value grid during the rollout"));
    }
    Ok(())
}

pub fn study(c: &Common) -> Res<()> {
    let t = Instant::now();
    let scn = resolve(c)?;
    let (kind, teb) = load_teb(&c.out)?;
    let plan = load_plan(&c.out)?;
    let sys = load_system(&scn, &c.out, kind)?;
    let cfg = hybrid_config(&scn, &teb);
    cfg.validate(&scn.tracker)?;
    let (metrics, logs) = containment_study(&scn, &sys, &teb, &plan, &cfg, source_of(c), scn.trials, scn.seed)?;
    ensure_dir(&c.out.join("trials"))?;
    let mut outputs = Vec::with_capacity(logs.len() + 1);
    for (i, log) in logs.iter().enumerate() {
        outputs.push(save_log(&c.out, &format!("trials/study_{i:04}.csv"), log)?);
    }
    outputs.push(write_json(&c.out, METRICS, &metrics)?);
    finish(&c.out, &c.scenario, "study", t, &outputs)
}

/// Per-case result of the full pipeline.
struct Case {
    kind: UncertaintyKind,
    teb: Option<Teb>,
    planned: Option<Planned>,
    log: Option<SimLog>,
    note: String,
}

fn run_case(scn: &Scenario, scenario_path: &Path, dir: &Path, kind: UncertaintyKind) -> Res<Case> {
    ensure_dir(dir)?;
    let mut case = Case { kind, teb: None, planned: None, log: None, note: String::new() };
    let t = Instant::now();
    let outputs = stage_fit(scn, dir)?;
    finish(dir, scenario_path, "fit-gp", t, &outputs)?;
    let t = Instant::now();
    let (outputs, teb) = match stage_solve(scn, dir, kind) {
        Ok(x) => x,
        Err(f) if f.code == EXIT_INFEASIBLE => {
            case.note = f.message;
            return Ok(case);
        }
        Err(f) => return Err(f),
    };
    finish(dir, scenario_path, "solve-hji", t, &outputs)?;
    let t = Instant::now();
    let planned = stage_plan(scn, dir, kind, &teb)?;
    finish(dir, scenario_path, "plan", t, &planned.outputs)?;
    if !planned.plan.feasible {
        case.note = plan_failure(&planned.plan).message;
    } else if teb.truncated {
        return Err(truncation_failure());
    } else {
        let t = Instant::now();
        let sys = load_system(scn, dir, kind)?;
        let (outputs, log) = stage_simulate(scn, dir, &sys, &teb, &planned.plan)?;
        finish(dir, scenario_path, "simulate", t, &outputs)?;
        let s = &log.summary;
        case.note = format!(
            "duration {:.2} s, collided {}, goal reached {}, exits {}",
            planned.plan.arrival_time(&scn.workspace.goal).unwrap_or(f64::NAN),
            s.collided,
            s.goal_reached,
            s.exits
        );
        case.log = Some(log);
    }
    case.teb = Some(teb);
    case.planned = Some(planned);
    Ok(case)
}

fn feasible(c: &Case) -> bool {
    c.planned.as_ref().is_some_and(|p| p.plan.feasible)
}

fn write_text(dir: &Path, rel: &str, text: &str) -> Res<PathBuf> {
    let p = dir.join(rel);
    fs::write(&p, text).map_err(|e| Failure::io(&p, e))?;
    Ok(PathBuf::from(rel))
}

fn trajectory_svg(scn: &Scenario, c: &Case) -> Res<String> {
    let title = format!("{}: {}", c.kind.as_str(), if feasible(c) { "feasible" } else { "infeasible" });
    let augmented = match &c.planned {
        Some(p) => p.augmented.clone(),
        None => Raster::empty(scn.workspace.raster_spec(scn.position_spacing())?),
    };
    let plan = c.planned.as_ref().map(|p| &p.plan);
    Ok(svg::trajectory(&scn.workspace, &augmented, plan, c.log.as_ref(), &title))
}

pub fn reproduce_sim1(c: &Common) -> Res<()> {
    let t = Instant::now();
    let scn = resolve(c)?;
    ensure_dir(&c.out)?;
    let gp = run_case(&scn, &c.scenario, &c.out.join("gp-teb"), UncertaintyKind::Gp)?;
    let cons = run_case(&scn, &c.scenario, &c.out.join("conservative-teb"), UncertaintyKind::Conservative)?;

    let y0 = scn.start.position_m[1];
    let mut layers = Vec::new();
    for (case, fill) in [(&cons, "#d62728"), (&gp, "#1f77b4")] {
        if let Some(teb) = &case.teb {
            layers.push((format!("{} y={y0:.2}", case.kind.as_str()), teb.projection_at(y0)?, fill));
        }
    }
    let mut outputs = vec![
        write_text(&c.out, "teb_comparison.svg", &svg::teb_comparison(&layers))?,
        write_text(&c.out, "trajectory_gp.svg", &trajectory_svg(&scn, &gp)?)?,
        write_text(&c.out, "trajectory_conservative.svg", &trajectory_svg(&scn, &cons)?)?,
    ];
    let mut verdict = String::new();
    for case in [&gp, &cons] {
        verdict.push_str(&format!("{}={}\n", case.kind.as_str(), if feasible(case) { "feasible" } else { "infeasible" }));
    }
    for case in [&gp, &cons] {
        verdict.push_str(&format!("# {}: {}\n", case.kind.as_str(), case.note));
    }
    outputs.push(write_text(&c.out, VERDICT, &verdict)?);
    finish(&c.out, &c.scenario, "reproduce-sim1", t, &outputs)?;
    print!("{verdict}");
    let tree = tree_hashes(&c.out)?;
    let listing: String = tree.iter().map(|(k, v)| format!("{v}  {k}\n")).collect();
    println!("tree sha256 {} ({} files)", hex::encode(Sha256::digest(listing.as_bytes())), tree.len());
    Ok(())
}
