use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use revhmc_bench::{circle, double_well};
use revhmc_core::harness::config::SchemeKind;
use revhmc_core::harness::experiments::{build_flow, build_kernel, build_scheme, initial_state, substream};
use revhmc_core::samplers::{run_chain, KernelKind};
use revhmc_core::solvers::{Solver, SolverBackend};

fn solvers(c: &mut Criterion) {
    let (cfg, model) = double_well();
    let x = [-0.5, 0.8];
    let mut g = c.benchmark_group("solve_double_well");
    for scheme in [SchemeKind::Gsv, SchemeKind::Imr] {
        let s = build_scheme(scheme, &model, 0.15);
        for backend in [SolverBackend::Newton, SolverBackend::NewtonSequential, SolverBackend::FixedPoint] {
            let solver = Solver::new(backend, cfg.solver.config());
            let id = BenchmarkId::new(format!("{scheme:?}"), format!("{backend:?}"));
            g.bench_function(id, |b| b.iter(|| solver.solve(&s, black_box(&x))));
        }
    }
    g.finish();
}

fn psi_rev(c: &mut Criterion) {
    let (cfg, model) = double_well();
    let flow = build_flow(&cfg, &model, 0.15).unwrap();
    c.bench_function("psi_rev_double_well", |b| b.iter(|| flow.psi_rev(black_box(&[-0.5, 0.8]))));
}

fn chains(c: &mut Criterion) {
    let mut g = c.benchmark_group("chain_1000_steps");
    let (cfg, model) = double_well();
    for kind in [KernelKind::Ghmc, KernelKind::GhmcForwardOnly, KernelKind::Hmc] {
        let kernel = build_kernel(&cfg, &model, kind, 0.15).unwrap();
        g.bench_function(BenchmarkId::new("double_well", kind.name()), |b| {
            b.iter(|| {
                let mut state = initial_state(&model, &cfg.q0, substream(1, 0, 0)).unwrap();
                run_chain(&kernel, &mut state, 1000, |_| {}).unwrap();
                state.x[0]
            })
        });
    }
    for aniso in [false, true] {
        let (cfg, model) = circle(aniso);
        let kernel = build_kernel(&cfg, &model, KernelKind::Ghmc, 0.1).unwrap();
        let name = if aniso { "circle_aniso" } else { "circle_iso" };
        g.bench_function(BenchmarkId::new(name, "ghmc"), |b| {
            b.iter(|| {
                let mut state = initial_state(&model, &[1.0, 0.0], substream(1, 0, 0)).unwrap();
                run_chain(&kernel, &mut state, 1000, |_| {}).unwrap();
                state.x[0]
            })
        });
    }
    g.finish();
}

criterion_group!(benches, solvers, psi_rev, chains);
criterion_main!(benches);
