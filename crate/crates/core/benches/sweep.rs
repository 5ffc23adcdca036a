use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use teb_core::hji::{solve_vi, Execution, SolverSettings};
use teb_core::sim::{
    build_system, collect_residuals, containment_study_with, fit_uncertainty, hybrid_config, plan_for, solve_teb,
    DisturbanceSource, Scenario, UncertaintyKind,
};

const SCENARIO: &str = include_str!("../../../scenarios/sim1.json");

fn small_scenario() -> Scenario {
    let mut scn: Scenario = serde_json::from_str(SCENARIO).expect("bundled scenario parses");
    scn.scale_grid(0.67).expect("scaled grid divides the workspace");
    scn.gp.samples = 40;
    scn
}

fn vi_sweeps(c: &mut Criterion) {
    let scn = small_scenario();
    let obs = collect_residuals(&scn, scn.gp.samples, scn.seed).unwrap();
    let fit = fit_uncertainty(&scn, &obs).unwrap();
    let sys = build_system(&scn, &fit, UncertaintyKind::Gp).unwrap();
    let mut g = c.benchmark_group("vi_sweeps");
    g.sample_size(10);
    for exec in [Execution::Parallel, Execution::Sequential] {
        let settings = SolverSettings { tol: 1e-12, max_iters: 20, execution: exec, ..scn.solver.clone() };
        g.bench_with_input(BenchmarkId::new("20_sweeps", format!("{exec:?}")), &settings, |b, s| {
            b.iter(|| solve_vi(&sys, &scn.grid, s).unwrap())
        });
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut scn = small_scenario();
    // the wall is sized for the full grid; an open workspace keeps the coarse plan feasible
    scn.workspace.obstacles.clear();
    let obs = collect_residuals(&scn, scn.gp.samples, scn.seed).unwrap();
    let fit = fit_uncertainty(&scn, &obs).unwrap();
    let sys = build_system(&scn, &fit, UncertaintyKind::Gp).unwrap();
    let teb = solve_teb(&scn, &sys).unwrap();
    let plan = plan_for(&scn, &teb).unwrap().plan;
    let cfg = hybrid_config(&scn, &teb);
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    for exec in [Execution::Parallel, Execution::Sequential] {
        g.bench_with_input(BenchmarkId::new("32_trials", format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| containment_study_with(&scn, &sys, &teb, &plan, &cfg, DisturbanceSource::Truth, 32, 1, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, vi_sweeps, monte_carlo);
criterion_main!(benches);
