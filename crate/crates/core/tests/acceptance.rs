//! End-to-end acceptance checks. Runs without the libtest harness so that the
//! per-criterion summary is always printed; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scdn_core::geometry_channel::Position3;
use scdn_core::gp_core::*;
use scdn_core::network_dynamics::{step_population, ArrivalModel, FailureModel, NetworkState};
use scdn_core::sim_cli::{self, Method, PosePolicy};
use scdn_core::theory;
use scdn_core::vfl_engine::{local_round, sgd_scale_coeff, Block, OptimizerSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gp_case(build: impl Fn(&mut GpProblem), init: &[f64]) -> (SolveReport, f64) {
    let mut p = GpProblem::new();
    build(&mut p);
    let t = Instant::now();
    let r = solve(&p, init, &SolverSettings::default()).unwrap();
    (r, t.elapsed().as_secs_f64())
}

fn criterion_1() -> Outcome {
    let (r1, t1) = gp_case(
        |p| {
            let x = p.add_var("x", 1e-3, 1e3);
            p.objective = Monomial::var(x).into();
            p.add_constraint("c", Monomial::power(x, -1.0).scale(2.0).into());
        },
        &[10.0],
    );
    let (r2, t2) = gp_case(
        |p| {
            let x = p.add_var("x", 1e-3, 1e3);
            let y = p.add_var("y", 1e-3, 1e3);
            p.objective = Posynomial::new(vec![Monomial::var(x), Monomial::var(y)]);
            p.add_constraint("c", (Monomial::var(x) * Monomial::var(y)).inv().into());
        },
        &[5.0, 0.5],
    );
    let (lo, hi) = (1e-2, 1e2);
    let (r3, t3) = gp_case(
        |p| {
            let x = p.add_var("x", lo, hi);
            let y = p.add_var("y", lo, hi);
            p.objective = (Monomial::var(x) * Monomial::power(y, 2.0)).into();
            p.add_constraint("prod", (Monomial::var(x) * Monomial::var(y)).inv().scale(4.0).into());
            p.add_constraint("xcap", Monomial::var(x).scale(0.25).into());
        },
        &[2.0, 5.0],
    );
    let n = 200;
    let at = |i: usize| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp();
    let mut grid = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (at(i), at(j));
            if 4.0 / (x * y) <= 1.0 && x <= 4.0 {
                grid = grid.min(x * y * y);
            }
        }
    }
    let e1 = (r1.objective - 2.0).abs() / 2.0;
    let e2 = (r2.objective - 2.0).abs() / 2.0;
    let e3 = (r3.objective - 4.0).abs() / 4.0;
    let slowest = t1.max(t2).max(t3);
    let pass = e1 < 1e-4 && e2 < 1e-4 && e3 < 1e-4 && r3.objective <= grid * (1.0 + 1e-3) && slowest < 1.0;
    outcome(
        pass,
        format!(
            "rel errors {e1:.1e} {e2:.1e} {e3:.1e}; grid best {grid:.5} vs {:.5}; slowest {slowest:.3}s",
            r3.objective
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_over, mut worst_anchor) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..100 {
        let terms = rng.gen_range(1..=5);
        let vars = rng.gen_range(1..=4);
        let h = Posynomial::new(
            (0..terms)
                .map(|_| {
                    let mut m = Monomial::constant(rng.gen_range(0.1..10.0));
                    for v in 0..vars {
                        m = m * Monomial::power(v, rng.gen_range(-2.0..2.0));
                    }
                    m
                })
                .collect(),
        );
        let anchor: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..10.0)).collect();
        let m = condense(&h, &anchor).unwrap();
        let ha = h.eval(&anchor).unwrap();
        worst_anchor = worst_anchor.max((ha - m.eval(&anchor).unwrap()).abs() / ha);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..10.0)).collect();
            let hv = h.eval(&x).unwrap();
            worst_over = worst_over.max((m.eval(&x).unwrap() - hv) / hv);
        }
    }
    outcome(
        worst_over <= 1e-12 && worst_anchor <= 1e-10,
        format!("max relative overshoot {worst_over:.1e}, anchor mismatch {worst_anchor:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let cases: Vec<(usize, PosePolicy)> = [2, 4, 6, 8, 10]
        .iter()
        .flat_map(|&n| PosePolicy::ALL.iter().map(move |&p| (n, p)))
        .collect();
    let checks: Vec<common::TraceCheck> = cases.par_iter().map(|&(n, p)| common::trace_check(n, p)).collect();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passes())
        .map(|c| format!("N={} {:?}", c.n, c.policy))
        .collect();
    let rise = checks.iter().map(|c| c.worst_rise).fold(0.0, f64::max);
    let iters = checks.iter().map(|c| c.iterations).max().unwrap_or(0);
    let secs = checks.iter().map(|c| c.secs).fold(0.0, f64::max);
    outcome(
        failed.is_empty(),
        format!(
            "{}/{} solves ok; worst rise {rise:.1e}, most iterations {iters}, slowest {secs:.2}s{}",
            checks.len() - failed.len(),
            checks.len(),
            if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
        ),
    )
}

fn criterion_4() -> Outcome {
    let sweep = common::tmax_sweep(&[5e-4, 5e-5, 5e-6, 5e-7]);
    let counts: Vec<usize> = sweep.iter().map(|s| s.1).collect();
    let last = &sweep.last().unwrap().2;
    let z = last.server_pose.z;
    let zmax = common::REGION[2];
    let pass = counts.windows(2).all(|w| w[1] <= w[0]) && last.devices.iter().all(|d| !d.active) && z < 1e-3 * zmax;
    outcome(pass, format!("active counts {counts:?}; final z {z:.2e} (limit {:.0e})", 1e-3 * zmax))
}

fn criterion_5() -> Outcome {
    let cases = [(2, 3, 5e-4), (2, 3, 5e-5), (2, 8, 1e-4), (4, 3, 5e-4), (4, 3, 1e-4), (4, 8, 2e-4)];
    let gaps: Vec<f64> = cases.par_iter().map(|&(n, s, t)| common::relax_round_gap(n, s, t)).collect();
    let worst = gaps.iter().map(|g| g.abs()).fold(0.0, f64::max);
    outcome(worst <= 1e-3, format!("worst relative gap {worst:.1e} over {} fixtures", gaps.len()))
}

fn criterion_6() -> Outcome {
    let theta: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).cos()).collect();
    let grads: Vec<Vec<f64>> = (0..5).map(|q| (0..8).map(|i| ((3 * q + i) as f64 * 0.9).sin()).collect()).collect();
    let mut worst = 0.0f64;
    for spec in [OptimizerSpec::momentum(0.07, 0.25), OptimizerSpec::proximal(0.07, 0.4)] {
        let got = local_round(&theta, 5, &spec, |_, q| grads[q].clone());
        for i in 0..8 {
            let sum: f64 = (0..5).map(|q| sgd_scale_coeff(&spec, 5, q) * grads[q][i]).sum();
            worst = worst.max((got[i] - (theta[i] - spec.learning_rate * sum)).abs());
        }
    }
    outcome(worst < 1e-10, format!("max abs error {worst:.1e}"))
}

fn criterion_7() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let hidden = if seed % 2 == 0 { vec![3] } else { vec![4, 3] };
        let st = common::tiny_state(seed, 2, 5, hidden, seed % 3 != 0);
        for block in [Block::Device(0), Block::Device(1), Block::Server] {
            let p = common::block_params(&st, block);
            let g = st.partial_grad(block, &st.data.train).unwrap();
            let fd = common::central_difference(&st, block, &p, &st.data.train, 1e-4);
            worst = worst.max(common::rel_err(&g, &fd));
        }
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.1e} over 20 instances"))
}

fn criterion_8() -> Outcome {
    let t = theory::momentum_rho_threshold();
    let oracle = common::threshold_oracle();
    let safe = (1..=50).all(|tau| theory::h_tau(0.9 * t, tau) >= 0.0);
    let broken = (1..=50).any(|tau| theory::h_tau(0.6, tau) < 0.0);
    outcome(
        (t - oracle).abs() < 1e-6 && (t - 0.2846).abs() < 1e-4 && safe && broken,
        format!("threshold {t:.6} vs oracle {oracle:.6}; 0.9x safe {safe}; rho 0.6 violated {broken}"),
    )
}

fn criterion_9() -> Outcome {
    let drift: Vec<(f64, f64)> = (0..50u64).into_par_iter().map(common::drift_bound_check).collect();
    let stat: Vec<(f64, f64)> = (0..50u64).into_par_iter().map(common::stationarity_bound_check).collect();
    let ok_l = drift.iter().filter(|(d, b)| d <= b).count();
    let ok_t = stat.iter().filter(|(l, r)| l <= r).count();
    let ratio = |v: &[(f64, f64)]| v.iter().map(|(a, b)| a / b).fold(0.0, f64::max);
    outcome(
        ok_l == 50 && ok_t == 50,
        format!(
            "drift bound {ok_l}/50 (max ratio {:.3}), stationarity bound {ok_t}/50 (max ratio {:.3})",
            ratio(&drift),
            ratio(&stat)
        ),
    )
}

fn criterion_10() -> Outcome {
    let trials = 10_000u64;
    let mut dev = common::device_spec(0, vec![0], vec![3]);
    dev.failure = FailureModel::with_bias(0.2);
    let s = NetworkState::new(vec![dev], Position3::default(), ArrivalModel::none());
    let exits = (0..trials).filter(|&t| !step_population(&s, t).1.exited.is_empty()).count();
    let freq = exits as f64 / trials as f64;
    let sd = (0.2 * 0.8 / trials as f64).sqrt();

    let rate = 0.7;
    let arrivals = ArrivalModel {
        rate,
        region_lo: [0.0; 3],
        region_hi: [100.0, 100.0, 0.0],
        template: Some(common::device_spec(0, Vec::new(), vec![3])),
        n_features: 8,
        slice_width: 2,
        overlap: true,
        shape_choices: vec![1.0],
        scale: 10.0,
    };
    let s = NetworkState::new(Vec::new(), Position3::default(), arrivals);
    let total: usize = (0..trials).map(|t| step_population(&s, t).1.entered.len()).sum();
    let mean = total as f64 / trials as f64;
    let psd = (rate / trials as f64).sqrt();
    outcome(
        (freq - 0.2).abs() <= 3.0 * sd && (mean - rate).abs() <= 3.0 * psd,
        format!(
            "exit freq {freq:.4} ({:.1} sd), entry mean {mean:.4} ({:.1} sd)",
            (freq - 0.2) / sd,
            (mean - rate) / psd
        ),
    )
}

fn criterion_11() -> Outcome {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let methods = [Method::Scdn, Method::Zoc, Method::MaxVfl];
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let runs: Vec<(Method, sim_cli::RunResult)> = jobs
        .par_iter()
        .map(|&(m, s)| (m, sim_cli::run(&sim_cli::blobs_preset(4, m, s)).unwrap()))
        .collect();
    let avg = |m: Method, f: &dyn Fn(&sim_cli::RunResult) -> f64| {
        let v: Vec<f64> = runs.iter().filter(|r| r.0 == m).map(|r| f(&r.1)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let final_of = |r: &sim_cli::RunResult| r.final_perf();
    let energy_of = |r: &sim_cli::RunResult| r.total_processing_energy();
    let drop_of = |r: &sim_cli::RunResult| r.first_exit_round().map(|k| r.perf_drop_at(k)).unwrap_or(0.0);
    let exits = runs.iter().filter(|r| r.1.first_exit_round().is_some()).count();
    let (scdn_final, zoc_final) = (avg(Method::Scdn, &final_of), avg(Method::Zoc, &final_of));
    let (scdn_e, max_e) = (avg(Method::Scdn, &energy_of), avg(Method::MaxVfl, &energy_of));
    let (scdn_drop, zoc_drop) = (avg(Method::Scdn, &drop_of), avg(Method::Zoc, &drop_of));
    let secs = t.elapsed().as_secs_f64();
    let a = scdn_final >= zoc_final;
    let b = scdn_e <= 0.85 * max_e;
    let c = zoc_drop >= 0.02 && scdn_drop < zoc_drop;
    outcome(
        a && b && c && secs < 600.0,
        format!(
            "(a) final {scdn_final:.4} vs zoc {zoc_final:.4}; (b) E_P {scdn_e:.3e} = {:.3} of max_vfl; \
             (c) drop zoc {zoc_drop:.4}, scdn {scdn_drop:.4}; {exits}/{} runs saw an exit; {secs:.0}s",
            scdn_e / max_e,
            runs.len()
        ),
    )
}

fn criterion_12() -> Outcome {
    let cfg = sim_cli::blobs_preset(4, Method::Scdn, 12);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let r = sim_cli::run(&cfg).unwrap();
        sim_cli::write_run(&cfg, &r, d.path()).unwrap();
    }
    let a = std::fs::read(dirs[0].path().join("metrics.csv")).unwrap();
    let b = std::fs::read(dirs[1].path().join("metrics.csv")).unwrap();
    outcome(a == b && !a.is_empty(), format!("{} bytes each, identical {}", a.len(), a == b))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "gp solver oracles", criterion_1),
        (2, "condensation bound", criterion_2),
        (3, "monotone solver traces", criterion_3),
        (4, "deadline sweep", criterion_4),
        (5, "relax and round vs enumeration", criterion_5),
        (6, "optimizer closed forms", criterion_6),
        (7, "gradient check", criterion_7),
        (8, "momentum threshold", criterion_8),
        (9, "drift and stationarity bounds", criterion_9),
        (10, "churn statistics", criterion_10),
        (11, "end-to-end blobs comparison", criterion_11),
        (12, "determinism", criterion_12),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let results: Vec<(usize, &str, Outcome, f64)> = criteria
        .into_par_iter()
        .map(|(k, name, f)| {
            let t = Instant::now();
            let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            });
            (k, name, o, t.elapsed().as_secs_f64())
        })
        .collect();
    let mut failed = 0;
    for (k, name, o, secs) in &results {
        println!(
            "criterion {k:>2}: {} | {name} | {} | {secs:.1}s",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
