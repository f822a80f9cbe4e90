use mvsde::harness::{
    density_files, fit_rows, run_convergence, run_convergence_for, run_density, run_nscaling, ConvRow,
    ExperimentConfig, ModelChoice,
};
use mvsde::brownian::PathGrid;
use mvsde::model::{model_example_quintic, ModelSpec};
use mvsde::stats::norm_moment;
use mvsde::stepper::{initial_ensemble, simulate_observed, Recording, SchemeConfig};
use mvsde::taming::TamingOperator;

fn cfg(model: &str, schemes: &[&str]) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelChoice { name: model.into(), mu0: 0.0, sigma0sq: 1.0 },
        schemes: schemes.iter().map(|s| s.to_string()).collect(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn me_fourth_moment_is_stable_across_step_sizes() {
    // all levels share one Brownian path set, so the spread measures h only
    let model = model_example_quintic();
    let me = SchemeConfig::tamed(TamingOperator::modified());
    let fine = PathGrid::generate(1, 1 << 9, 1.0, 100, 1).unwrap();
    let init = initial_ensemble(&model, 1, 100);
    let sups: Vec<f64> = [8, 4, 2, 1]
        .iter()
        .map(|&f| {
            let mut sup = 0.0f64;
            let grid = fine.coarsen(f).unwrap();
            let traj = simulate_observed(init.clone(), &model, &me, &grid, &Recording::default(), &mut |e| {
                sup = sup.max(norm_moment(e, 4));
            })
            .unwrap();
            assert!(traj.divergence.is_none());
            sup
        })
        .collect();
    let lo = sups.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sups.iter().copied().fold(0.0, f64::max);
    assert!(hi / lo - 1.0 < 0.2, "{sups:?}");
}

#[test]
fn quadrupling_repetitions_halves_standard_error() {
    let se = |reps: usize| {
        let mut c = cfg("cubic", &["me"]);
        c.h_ref = 2f64.powi(-5);
        c.h_list = vec![c.h_ref];
        c.n_list = vec![100];
        c.proxy_n = 4000;
        c.repetitions = reps;
        run_nscaling(&c).unwrap().rows[0].std_err
    };
    let ratio = se(50) / se(200);
    assert!((ratio / 2.0 - 1.0).abs() <= 0.3, "ratio {ratio}");
}

#[test]
fn rows_do_not_depend_on_other_step_sizes() {
    let mut c = cfg("cubic", &["me", "ssm"]);
    c.particles = 40;
    c.h_ref = 2f64.powi(-9);
    c.h_list = (4..=7).map(|e| 2f64.powi(-e)).collect();
    let full = run_convergence(&c).unwrap();
    c.h_list = vec![2f64.powi(-5), 2f64.powi(-7)];
    let part = run_convergence(&c).unwrap();
    for (f, p) in full.schemes.iter().zip(&part.schemes) {
        assert_eq!(p.rows[0], f.rows[1]);
        assert_eq!(p.rows[1], f.rows[3]);
    }
}

#[test]
fn excluded_rows_only_change_the_fit() {
    let row = |e: i32, rmse: f64| ConvRow { h: 2f64.powi(-e), rmse, log2_h: -e as f64, log2_rmse: rmse.log2(), diverged: rmse.is_nan() };
    let clean: Vec<ConvRow> = (3..7).map(|e| row(e, 2f64.powf(-0.5 * e as f64))).collect();
    let mut dirty = clean.clone();
    dirty.insert(0, row(2, f64::NAN));
    dirty.push(row(7, 0.0));
    let (a, ex_a) = fit_rows(&clean);
    let (b, ex_b) = fit_rows(&dirty);
    assert_eq!((ex_a, ex_b), (0, 2));
    assert_eq!(a, b);
    assert!((a.unwrap().slope - 0.5).abs() < 1e-12);
    assert_eq!(&dirty[1..5], &clean[..]);
}

#[test]
fn coarse_and_fine_brownian_paths_end_at_the_same_point() {
    // X = W: any coupled pair of runs must agree exactly at T
    let bm = ModelSpec::builder("bm", 1, 1).diffusion(|_, _, _, _, out| out[0] = 1.0).build().unwrap();
    let mut c = cfg("cubic", &["em"]);
    c.particles = 9;
    c.h_ref = 2f64.powi(-10);
    c.h_list = (3..=9).map(|e| 2f64.powi(-e)).collect();
    let r = run_convergence_for(&bm, &c).unwrap();
    assert!(r.schemes[0].rows.iter().all(|row| row.rmse == 0.0));
    assert!(r.schemes[0].fit.is_none());
}

#[test]
fn density_outputs_are_byte_identical_across_runs() {
    let mut c = cfg("doublewell", &["te1", "fte"]);
    c.particles = 200;
    c.horizon = 2.0;
    c.h_ref = 1e-2;
    c.h_list = vec![1e-2];
    c.record_times = vec![1.0, 2.0];
    c.ssm_reference = true;
    let a = density_files(&run_density(&c).unwrap(), &c).unwrap();
    let b = density_files(&run_density(&c).unwrap(), &c).unwrap();
    assert_eq!(a, b);
    let names: Vec<&str> = a.iter().map(|f| f.name.as_str()).collect();
    assert!(names.contains(&"density_ssm_ref_T2.csv"), "{names:?}");
    assert!(a.iter().find(|f| f.name == "density_te1_T1.csv").unwrap().contents.starts_with("x,density\n"));
}
