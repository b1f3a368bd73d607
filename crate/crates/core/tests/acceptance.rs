//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use lvrt_pinn::analysis::*;
use lvrt_pinn::dataset::*;
use lvrt_pinn::dynamics::*;
use lvrt_pinn::layout::{out, InputBox, N_OUTPUTS};
use lvrt_pinn::milp::*;
use lvrt_pinn::pinn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "criterion {n} ({name}): {} [{detail}; {:.1} s]",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    pass
}

fn random_net(widths: &[usize], seed: u64) -> MlpModel {
    let mut m = MlpModel::he_uniform(widths, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    for l in &mut m.layers {
        for b in &mut l.biases {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    m
}

fn unit_domain(n: usize) -> InputDomain {
    InputDomain::new(vec![-1.0; n], vec![1.0; n])
}

fn sample(d: &InputDomain, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d.dim()).map(|i| rng.gen_range(d.lower[i]..=d.upper[i])).collect()
}

fn encoding_exactness() -> Outcome {
    let start = Instant::now();
    let nets = [
        vec![3, 16, 4],
        vec![2, 8, 8, 2],
        vec![3, 16, 16, 14],
        vec![3, 12, 16, 8, 3],
        vec![4, 16, 16, 16, 2],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut solves = 0;
    for (n, w) in nets.iter().enumerate() {
        let m = random_net(w, 1000 + n as u64);
        let d = unit_domain(w[0]);
        let base = encode(&m, &d, &interval_bounds(&m, &d)).unwrap();
        for _ in 0..100 {
            let x = sample(&d, &mut rng);
            let y = m.forward(&x).unwrap();
            let k = rng.gen_range(0..m.n_outputs());
            let mut p = base.clone();
            for (i, v) in p.roles.inputs.clone().into_iter().enumerate() {
                p.fix(v, x[i]);
            }
            let sense = if rng.gen_bool(0.5) {
                ObjectiveSense::Maximize
            } else {
                ObjectiveSense::Minimize
            };
            p.set_objective(sense, vec![(p.roles.outputs[k], 1.0)]);
            let s = branch_and_bound(&p).unwrap();
            worst = worst.max((s.objective - y[k]).abs());
            solves += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-6 && secs < 120.0,
        format!("{solves} solves, max |milp - forward| = {worst:.2e}, runtime {secs:.1} s (limit 120)"),
    )
}

fn branch_and_bound_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let m = random_net(&[2, 6, 1], 2000 + seed);
        let d = unit_domain(2);
        // widen every interval across zero so all six neurons carry a binary
        let mut b = interval_bounds(&m, &d);
        for j in 0..6 {
            b.lower[0][j] = b.lower[0][j].min(-0.5);
            b.upper[0][j] = b.upper[0][j].max(0.5);
        }
        let mut p = encode(&m, &d, &b).unwrap();
        assert_eq!(p.n_binaries(), 6);
        let sense = if seed % 2 == 0 {
            ObjectiveSense::Maximize
        } else {
            ObjectiveSense::Minimize
        };
        p.set_objective(sense, vec![(p.roles.outputs[0], 1.0)]);
        let bb = branch_and_bound(&p).unwrap().objective;
        let bins: Vec<usize> = (0..p.variables.len()).filter(|&j| p.variables[j].binary).collect();
        let mut best = match sense {
            ObjectiveSense::Maximize => f64::NEG_INFINITY,
            ObjectiveSense::Minimize => f64::INFINITY,
        };
        for mask in 0..64usize {
            let mut q = p.relaxed();
            for (k, &j) in bins.iter().enumerate() {
                q.fix(j, (mask >> k & 1) as f64);
            }
            let s = simplex_solve(&q).unwrap();
            if s.is_optimal() {
                best = match sense {
                    ObjectiveSense::Maximize => best.max(s.objective),
                    ObjectiveSense::Minimize => best.min(s.objective),
                };
            }
        }
        worst = worst.max((bb - best).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-6 && secs < 300.0,
        format!("20 MILPs, max |b&b - enumeration| = {worst:.2e}, runtime {secs:.1} s (limit 300)"),
    )
}

fn bound_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut escapes = 0;
    let mut widths_ok = true;
    let mut summary = Vec::new();
    for (n, w) in [vec![3, 8, 8, 2], vec![3, 16, 16, 14], vec![2, 8, 8, 8, 1]].iter().enumerate() {
        let m = random_net(w, 3000 + n as u64);
        let d = unit_domain(w[0]);
        let ib = interval_bounds(&m, &d);
        let tb = tighten_bounds_lp(&m, &d, &ib, &TightenOptions::default()).unwrap();
        for _ in 0..1000 {
            let x = sample(&d, &mut rng);
            if !ib.contains_point(&m, &x, 0.0) || !tb.contains_point(&m, &x, 0.0) {
                escapes += 1;
            }
        }
        widths_ok &= tb.total_width() <= ib.total_width() && tb.nested_in(&ib, 0.0);
        summary.push(format!("{:.2}/{:.2}", tb.total_width(), ib.total_width()));
    }
    (
        escapes == 0 && widths_ok,
        format!(
            "3 nets x 1000 samples, {escapes} escapes, tightened/interval width {}",
            summary.join(", ")
        ),
    )
}

fn autodiff() -> Outcome {
    let p = ConverterParams::default();
    let grid = GridSpec {
        delta_t_values: vec![0.1, 0.2],
        delta_v_values: vec![0.3, 0.6],
        dt: 1e-3,
        horizon: 0.5,
    };
    let set = generate_training_set(&grid, &p, 50, 30, 3).unwrap();
    let cfg = TrainConfig {
        hidden: vec![8, 8],
        seed: 5,
        ..TrainConfig::default()
    };
    let mut m = initial_model(&set, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for l in &mut m.layers {
        for b in &mut l.biases {
            *b = rng.gen_range(-0.3..0.3);
        }
    }
    let w = LossWeights::default();
    let g = grad(&m, &set, &w, &p).unwrap();
    let theta = m.params_flat();
    let h = 1e-6;
    let mut worst_g: f64 = 0.0;
    let mut n_g = 0;
    for _ in 0..120 {
        let k = rng.gen_range(0..theta.len());
        let mut tp = theta.clone();
        let mut mp = m.clone();
        tp[k] += h;
        mp.set_params_flat(&tp);
        let lp = loss(&mp, &set, &w, &p).unwrap().total;
        tp[k] -= 2.0 * h;
        mp.set_params_flat(&tp);
        let lm = loss(&mp, &set, &w, &p).unwrap().total;
        let fd = (lp - lm) / (2.0 * h);
        worst_g = worst_g.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3));
        n_g += 1;
    }
    let mut worst_t: f64 = 0.0;
    let mut n_t = 0;
    while n_t < 120 {
        let x = [rng.gen_range(0.05..0.45), rng.gen_range(0.3..0.6), rng.gen_range(0.1..0.2)];
        let ht = 1e-7;
        let up = [x[0] + ht, x[1], x[2]];
        let dn = [x[0] - ht, x[1], x[2]];
        // skip inputs whose stencil straddles a ReLU kink
        let pattern = |z: &[f64]| -> Vec<bool> {
            m.pre_activations(z).concat().iter().map(|v| *v > 0.0).collect()
        };
        if pattern(&up) != pattern(&dn) {
            continue;
        }
        let d = m.forward_dt(&x).unwrap();
        let (yu, yd) = (m.forward(&up).unwrap(), m.forward(&dn).unwrap());
        for i in 0..N_OUTPUTS {
            let fd = (yu[i] - yd[i]) / (2.0 * ht);
            worst_t = worst_t.max((fd - d[i]).abs() / fd.abs().max(d[i].abs()).max(1.0));
        }
        n_t += 1;
    }
    (
        worst_g <= 1e-4 && worst_t <= 1e-4,
        format!(
            "grad: {n_g} coordinates, worst rel. error {worst_g:.2e}; forward_dt: {n_t} inputs, worst rel. error {worst_t:.2e}"
        ),
    )
}

fn simulator_fidelity() -> Outcome {
    let p = ConverterParams::default();
    let eq = find_equilibrium(&p, 1.0).unwrap();
    let r = rhs(&eq, 1.0, &p).unwrap();
    let residual = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let x0 = ConverterState {
        theta_pll: 0.08,
        i_d: 0.5,
        i_q: -0.1,
        v_meas: 0.97,
        f_latched: 1.0,
    };
    let quiet = DisturbanceSpec::new(0.0, 0.0);
    let end = |dt: f64| integrate(&x0, &quiet, &p, dt, 0.064).unwrap().last_state().continuous();
    let reference = end(1e-3);
    let err = |dt: f64| {
        let e = end(dt);
        (0..4).map(|i| (e[i] - reference[i]).abs()).fold(0.0, f64::max)
    };
    let ratio = err(8e-3) / err(4e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut monotone = true;
    let mut identity: f64 = 0.0;
    for _ in 0..50 {
        let (dv, dt) = (rng.gen_range(0.0..0.9), rng.gen_range(0.0..0.3));
        let traj = simulate(&p, dv, dt, &SimSettings::default()).unwrap();
        monotone &= traj.states.windows(2).all(|w| w[1].f_latched <= w[0].f_latched);
        for (s, a) in traj.states.iter().zip(&traj.algebraic) {
            identity = identity
                .max((a.v_gd * s.i_d + a.v_gq * s.i_q - a.p_total).abs())
                .max((a.v_gq * s.i_d - a.v_gd * s.i_q - a.q_total).abs());
        }
    }
    (
        residual < 1e-10 && ratio >= 12.0 && monotone && identity <= 1e-12,
        format!(
            "equilibrium residual {residual:.1e}, RK4 error ratio {ratio:.1}, f_latched monotone on 50 runs: {monotone}, P/Q identity error {identity:.1e}"
        ),
    )
}

fn analytic_oracle() -> Outcome {
    let start = Instant::now();
    let p = ConverterParams::default().without_impedance();
    let grid = [0.35, 0.4, 0.5, 0.6, 0.8];
    let c = ground_truth_curve(
        &grid,
        QueryKind::Lvrt { epsilon: 0.0 },
        &p,
        &SimSettings::default(),
        (0.0, 0.5),
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for pt in &c.points {
        let exact = p.t_m * (pt.delta_v / (pt.delta_v - (1.0 - p.v_int))).ln();
        worst = worst.max(pt.delta_t.map_or(f64::INFINITY, |t| (t - exact).abs()));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 2e-3 && secs < 60.0,
        format!("max |simulated - closed form| = {worst:.2e} s over 5 drops, runtime {secs:.1} s (limit 60)"),
    )
}

/// Duration of a point for ordering checks; infeasible points sort lowest.
fn order_value(s: PointStatus, t: Option<f64>) -> Option<f64> {
    match s {
        PointStatus::Optimal | PointStatus::NeverCritical => t,
        PointStatus::Infeasible => Some(f64::NEG_INFINITY),
        PointStatus::Failed => None,
    }
}

fn non_increasing(v: &[Option<f64>]) -> bool {
    v.iter().all(Option::is_some) && v.windows(2).all(|w| w[1].unwrap() <= w[0].unwrap() + 1e-9)
}

struct Pipeline {
    problem: BoundaryProblem,
}

fn desk_scale_pipeline(slot: &mut Option<Pipeline>) -> Outcome {
    let start = Instant::now();
    let p = ConverterParams::default();
    let sim = SimSettings::default();
    let grid = GridSpec {
        delta_t_values: vec![0.1, 0.15, 0.2, 0.25],
        delta_v_values: vec![0.3, 0.45, 0.6],
        dt: 1e-3,
        horizon: 1.0,
    };
    let set = generate_training_set(&grid, &p, 5, 2000, 1).unwrap();
    // the measured voltage carries the boundary, so its terms are weighted up
    let mut weights = LossWeights::uniform(1.0, 1.0, 0.1, 0.1);
    weights.x[out::V_MEAS] = 10.0;
    weights.f[out::V_MEAS] = 10.0;
    let cfg = TrainConfig {
        hidden: vec![16, 16],
        epochs: 2000,
        batch_size: 128,
        collocation_batch: 512,
        seed: 1,
        weights,
        n_collocation: 2000,
        ..TrainConfig::default()
    };
    let (model, _) = train(&set, &cfg, &p).unwrap();
    let mse = physical_mse(&model, &set.labeled).unwrap()[out::V_MEAS];
    let train_s = start.elapsed().as_secs_f64();

    let ib: InputBox = set.input_box();
    let d = InputDomain::from(&ib);
    let interval = interval_bounds(&model, &d);
    let tight = tighten_bounds_lp(&model, &d, &interval, &TightenOptions::default()).unwrap();
    let problem = BoundaryProblem::new(&model, ib, tight, BoundsSource::LpTightened, &p).unwrap();

    let dv_grid = delta_v_grid(0.35, 0.6, 0.05).unwrap();
    let eps0 = problem.sweep(QueryKind::Lvrt { epsilon: 0.0 }, &dv_grid).unwrap();
    let eps5 = problem.sweep(QueryKind::Lvrt { epsilon: 0.05 }, &dv_grid).unwrap();
    let truth = ground_truth_curve(&dv_grid, QueryKind::Lvrt { epsilon: 0.0 }, &p, &sim, (0.0, 0.25)).unwrap();

    let monotone = non_increasing(
        &eps0.points.iter().map(|q| order_value(q.status, q.delta_t)).collect::<Vec<_>>(),
    );
    let c0 = compare_curves(&eps0, &truth).unwrap();
    let c5 = compare_curves(&eps5, &truth).unwrap();
    let mean = c0.mean_abs.unwrap_or(f64::INFINITY);
    let spot = spot_check(&eps5, &p, &sim, 5e-3).unwrap();
    let spot_bad = spot.iter().filter(|s| s.violated).count();
    let secs = start.elapsed().as_secs_f64();
    let fmt = |c: &BoundaryCurve| {
        c.points
            .iter()
            .map(|q| match q.delta_t {
                Some(t) if q.status == PointStatus::Optimal => format!("{t:.3}"),
                _ => q.status.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("  delta_V          {}", dv_grid.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("  "));
    println!("  ground truth     {}", fmt(&truth));
    println!("  milp eps = 0     {}", fmt(&eps0));
    println!("  milp eps = 0.05  {}", fmt(&eps5));
    *slot = Some(Pipeline { problem });
    (
        mse < 1e-3 && monotone && mean <= 0.03 && c5.n_non_conservative == 0 && secs < 1800.0,
        format!(
            "V_meas MSE {mse:.2e} (limit 1e-3), eps = 0 non-increasing: {monotone}, mean |dT*| error {mean:.4} s over {} points (limit 0.03), eps = 0.05 non-conservative points: {}, spot-check violations: {spot_bad}/{}, training {train_s:.0} s, total {secs:.0} s (limit 1800)",
            c0.points.iter().filter(|q| q.difference.is_some()).count(),
            c5.n_non_conservative,
            spot.len()
        ),
    )
}

fn monotonicity(slot: &Option<Pipeline>) -> Outcome {
    let Some(pipe) = slot else {
        return (false, "no trained model from criterion 7".into());
    };
    let bp = &pipe.problem;
    let mut ok = true;
    let mut rows = Vec::new();
    for dv in [0.35, 0.45, 0.55] {
        let lv: Vec<Option<f64>> = [0.0, 0.025, 0.05]
            .iter()
            .map(|&e| {
                let s = bp.solve_lvrt(dv, e).unwrap();
                order_value(s.status, s.delta_t)
            })
            .collect();
        let pw: Vec<Option<f64>> = [0.25, 0.5, 0.6, 0.9, 0.98]
            .iter()
            .map(|&mu| {
                let s = bp.solve_power(dv, mu).unwrap();
                order_value(s.status, s.delta_t)
            })
            .collect();
        ok &= non_increasing(&lv) && non_increasing(&pw);
        let show = |v: &[Option<f64>]| {
            v.iter()
                .map(|x| match x {
                    Some(t) if t.is_finite() => format!("{t:.3}"),
                    Some(_) => "infeasible".into(),
                    None => "failed".into(),
                })
                .collect::<Vec<_>>()
                .join("/")
        };
        rows.push(format!("dV {dv}: eps {} mu {}", show(&lv), show(&pw)));
    }
    (ok, rows.join("; "))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let m = random_net(&[3, 16, 16, 14], 9);
    let path = dir.path().join("model.json");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model_ok = (0..100).all(|_| {
        let x = sample(&unit_domain(3), &mut rng);
        let (a, b) = (m.forward(&x).unwrap(), back.forward(&x).unwrap());
        a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits())
    });

    let mut lp = MilpProblem::new(ObjectiveSense::Maximize);
    let x = lp.add_var("x", 0.0, 4.0);
    let b = lp.add_binary("b");
    lp.add_constraint("cap", vec![(x, 1.0), (b, -2.5)], Sense::Le, 1.0);
    lp.add_constraint("floor", vec![(x, 1.0), (b, 1.0)], Sense::Ge, 0.5);
    lp.set_objective(ObjectiveSense::Maximize, vec![(x, 1.0), (b, -0.25)]);
    let lp_ok = lp_string(&lp) == include_str!("fixtures/toy.lp");

    let grid = GridSpec {
        delta_t_values: vec![0.1, 0.2],
        delta_v_values: vec![0.3, 0.6],
        dt: 1e-3,
        horizon: 0.5,
    };
    let set = generate_training_set(&grid, &ConverterParams::default(), 10, 50, 4).unwrap();
    let set_dir = dir.path().join("set");
    write_set(&set, &set_dir).unwrap();
    let data_ok = read_set(&set_dir).unwrap() == set;
    (
        model_ok && lp_ok && data_ok,
        format!("model bitwise: {model_ok}, LP golden file: {lp_ok}, dataset identity: {data_ok}"),
    )
}

fn main() {
    let mut pipeline = None;
    let results = [
        run(1, "encoding exactness", encoding_exactness),
        run(2, "branch-and-bound correctness", branch_and_bound_correctness),
        run(3, "bound soundness and tightening", bound_soundness),
        run(4, "autodiff correctness", autodiff),
        run(5, "simulator fidelity", simulator_fidelity),
        run(6, "analytic boundary oracle", analytic_oracle),
        run(7, "desk-scale pipeline", || desk_scale_pipeline(&mut pipeline)),
        run(8, "epsilon and mu monotonicity", || monotonicity(&pipeline)),
        run(9, "format round-trips", round_trips),
    ];
    let failed: Vec<usize> = (1..=9).filter(|&i| !results[i - 1]).collect();
    if failed.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
