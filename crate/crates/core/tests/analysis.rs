use lvrt_pinn::analysis::*;
use lvrt_pinn::dynamics::{ConverterParams, SimSettings};
use lvrt_pinn::layout::{out, InputBox};
use lvrt_pinn::milp::{interval_bounds, tighten_bounds_lp, BoundsSource, InputDomain, TightenOptions};
use lvrt_pinn::pinn::{Affine, MlpModel};

fn training_box() -> InputBox {
    InputBox::new((0.0, 1.0), (0.3, 0.6), (0.1, 0.25))
}

/// Random converter-shaped network whose `V_meas` output is shifted so the
/// LVRT threshold cuts through its range on the `t = delta_T` diagonal.
fn random_pinn(seed: u64, params: &ConverterParams) -> MlpModel {
    let mut m = MlpModel::he_uniform(&[3, 12, 12, 14], seed);
    let mut named = MlpModel::pinn_layout(&[12, 12]);
    named.layers = m.layers.clone();
    m = named;
    m.input_scaling = Affine::unit_box(&training_box());
    m.output_scaling.scale[out::V_MEAS] = 0.2;
    let mut vals = Vec::new();
    for i in 0..=20 {
        for k in 0..=20 {
            let dv = 0.3 + 0.3 * i as f64 / 20.0;
            let dt = 0.1 + 0.15 * k as f64 / 20.0;
            vals.push(m.forward(&[dt, dv, dt]).unwrap()[out::V_MEAS]);
        }
    }
    vals.sort_by(f64::total_cmp);
    m.output_scaling.offset[out::V_MEAS] += params.v_int + 0.02 - vals[vals.len() / 2];
    m
}

fn problem(seed: u64, source: BoundsSource) -> BoundaryProblem {
    let params = ConverterParams::default();
    let m = random_pinn(seed, &params);
    let ib = training_box();
    let d = InputDomain::from(&ib);
    let mut b = interval_bounds(&m, &d);
    if source == BoundsSource::LpTightened {
        b = tighten_bounds_lp(&m, &d, &b, &TightenOptions::default()).unwrap();
    }
    BoundaryProblem::new(&m, ib, b, source, &params).unwrap()
}

#[test]
fn ground_truth_matches_closed_form_without_impedance() {
    let p = ConverterParams::default().without_impedance();
    let grid = [0.35, 0.4, 0.5, 0.6, 0.8];
    let c = ground_truth_curve(&grid, QueryKind::Lvrt { epsilon: 0.0 }, &p, &SimSettings::default(), (0.0, 0.5)).unwrap();
    let drop = 1.0 - p.v_int;
    for pt in &c.points {
        let exact = p.t_m * (pt.delta_v / (pt.delta_v - drop)).ln();
        assert_eq!(pt.status, PointStatus::Optimal);
        assert!(
            (pt.delta_t.unwrap() - exact).abs() < 2e-3,
            "dV {}: {} vs {exact}",
            pt.delta_v,
            pt.delta_t.unwrap()
        );
    }
    assert!(c.is_non_increasing(0.0));
}

#[test]
fn ground_truth_statuses_and_calibration() {
    let p = ConverterParams::default();
    let sim = SimSettings::default();
    let c = ground_truth_curve(&[0.2, 0.5], QueryKind::Lvrt { epsilon: 0.0 }, &p, &sim, (0.0, 0.25)).unwrap();
    assert_eq!(c.points[0].status, PointStatus::NeverCritical);
    assert!((c.points[1].delta_t.unwrap() - 0.105).abs() < 0.02);
}

#[test]
fn milp_boundary_is_tight_on_the_voltage_constraint() {
    let mut optimal = 0;
    for seed in 0..3 {
        let bp = problem(seed, BoundsSource::Interval);
        for dv in [0.3, 0.4, 0.5, 0.6] {
            for eps in [0.0, 0.05] {
                let s = bp.solve_lvrt(dv, eps).unwrap();
                if s.status != PointStatus::Optimal {
                    continue;
                }
                optimal += 1;
                let dt = s.delta_t.unwrap();
                let v = bp.model.forward(&[dt, dv, dt]).unwrap()[out::V_MEAS];
                assert!(
                    (v - (bp.params.v_int + eps)).abs() < 1e-5,
                    "seed {seed} dV {dv}: V = {v}"
                );
            }
        }
    }
    assert!(optimal >= 5, "only {optimal} optimal points exercised");
}

#[test]
fn boundaries_are_monotone_in_epsilon_and_mu() {
    let bp = problem(4, BoundsSource::Interval);
    let value = |s: BoundarySolution| s.delta_t.unwrap_or(f64::NEG_INFINITY);
    for dv in [0.35, 0.45, 0.55] {
        let lv: Vec<f64> = [0.0, 0.025, 0.05]
            .iter()
            .map(|&e| value(bp.solve_lvrt(dv, e).unwrap()))
            .collect();
        assert!(lv.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{lv:?}");
        let pw: Vec<f64> = [0.0, 0.25, 0.5, 0.6, 0.9, 0.98]
            .iter()
            .map(|&mu| value(bp.solve_power(dv, mu).unwrap()))
            .collect();
        assert!(pw.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{pw:?}");
        // a vacuous power constraint leaves the whole box
        assert_eq!(bp.solve_power(dv, 0.0).unwrap().status, PointStatus::NeverCritical);
    }
}

#[test]
fn repeated_solves_are_identical() {
    for source in [BoundsSource::Interval, BoundsSource::LpTightened] {
        let bp = problem(1, source);
        let kind = QueryKind::Lvrt { epsilon: 0.025 };
        let grid = [0.3, 0.4, 0.5, 0.6];
        let a = bp.sweep(kind, &grid).unwrap();
        let b = bp.sweep(kind, &grid).unwrap();
        let vals = |c: &BoundaryCurve| c.points.iter().map(|p| (p.status, p.delta_t)).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_eq!(a.meta.bounds_source, Some(source));
    }
}

#[test]
fn tightened_bounds_give_the_same_boundary() {
    let a = problem(2, BoundsSource::Interval);
    let b = problem(2, BoundsSource::LpTightened);
    for dv in [0.3, 0.45, 0.6] {
        let x = a.solve_lvrt(dv, 0.0).unwrap();
        let y = b.solve_lvrt(dv, 0.0).unwrap();
        assert_eq!(x.status, y.status);
        if let (Some(p), Some(q)) = (x.delta_t, y.delta_t) {
            assert!((p - q).abs() < 1e-6);
        }
    }
}

#[test]
fn query_outside_training_box_is_rejected() {
    let bp = problem(0, BoundsSource::Interval);
    assert!(matches!(bp.solve_lvrt(0.25, 0.0), Err(AnalysisError::InvalidQuery(_))));
}

#[test]
fn spot_check_flags_only_violations() {
    let p = ConverterParams::default();
    let sim = SimSettings::default();
    let kind = QueryKind::Lvrt { epsilon: 0.0 };
    let truth = ground_truth_curve(&[0.4, 0.5], kind, &p, &sim, (0.0, 0.25)).unwrap();
    let checks = spot_check(&truth, &p, &sim, 5e-3).unwrap();
    assert_eq!(checks.len(), 2);
    assert!(checks.iter().all(|c| !c.violated));
    let mut late = truth.clone();
    for pt in &mut late.points {
        pt.delta_t = pt.delta_t.map(|t| t + 0.02);
    }
    assert!(spot_check(&late, &p, &sim, 5e-3).unwrap().iter().all(|c| c.violated));
}
