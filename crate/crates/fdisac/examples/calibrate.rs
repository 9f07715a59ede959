// Calibration probe: desk-scale scenario statistics across seeds.
use fdisac::baselines::{solve_nlp, solve_scheme};
use fdisac::channel::{sample_paths, AntennaLayout};
use fdisac::config::{GmlConfig, ScenarioConfig, Scheme, SolverSpec};
use fdisac::gml::FrozenGroups;
use fdisac::metrics::{full_report, BeamformingState, SiForm};
use num_complex::Complex64;
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("init");
    let cfg = ScenarioConfig::default();

    match mode {
        "init" => init_stats(&cfg),
        "gml" => gml_stats(&cfg, &args),
        "nlp" => nlp_stats(&cfg),
        "pu" => pu_trace(&cfg, &args),
        "dyn" => dynamics(&cfg, &args),
        other => eprintln!("unknown mode {other}"),
    }
}

fn init_stats(cfg: &ScenarioConfig) {
    // Metrics at the FPA-grid initialization with uniform power split.
    for seed in 0..8u64 {
        let real = sample_paths(cfg, seed).unwrap();
        let layout = AntennaLayout::fpa_grid(cfg).unwrap();
        let per = (cfg.p_bs / (cfg.n_t * cfg.d) as f64).sqrt();
        let state = BeamformingState {
            p: vec![vec![Complex64::new(per, 0.0); cfg.n_t]; cfg.d],
            p_u: vec![cfg.p_u_max / 2.0; cfg.u],
            z: vec![vec![Complex64::new(1.0, 0.0); cfg.n_rc]; cfg.u],
            v: vec![Complex64::new(1.0, 0.0); cfg.n_rs],
            layout: layout.clone(),
        };
        let ch = fdisac::channel::channels_at(cfg, &layout, &real).unwrap();
        let r = full_report(&ch, &state, cfg).unwrap();
        println!(
            "seed {seed}: lambda_t {:8.3}  r_d {:?}  r_u {:?}  tx {:.3}",
            r.lambda_t,
            r.r_d.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>(),
            r.r_u.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>(),
            r.tx_power
        );
    }
}

fn gml_stats(cfg: &ScenarioConfig, args: &[String]) {
    let n_e: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let hidden: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let step: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let gml = GmlConfig {
        n_i: 10,
        n_o: 1,
        n_e,
        hidden,
        step_scale: step,
        meta_lr: lr,
        ..GmlConfig::default()
    };
    let t0 = std::time::Instant::now();
    let results: Vec<_> = (0..8u64)
        .into_par_iter()
        .map(|seed| {
            let real = sample_paths(cfg, seed).unwrap();
            let (sol, trace) = fdisac::gml::run(
                cfg,
                &real,
                &gml,
                seed,
                FrozenGroups::default(),
                SiForm::Quadratic,
            )
            .unwrap();
            (seed, sol, trace)
        })
        .collect();
    for (seed, sol, trace) in &results {
        let first_feasible = trace.epochs.iter().position(|e| e.feasible);
        println!(
            "seed {seed}: lambda {:8.3} feasible {} first_feas_epoch {:?} r_d {:?} r_u {:?}",
            sol.lambda_t,
            sol.feasible,
            first_feasible,
            sol.report.r_d.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>(),
            sol.report.r_u.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>(),
        );
    }
    println!("total {:.1}s for 8 runs (n_e={n_e} hidden={hidden} step={step} lr={lr})", t0.elapsed().as_secs_f64());
}

fn pu_trace(cfg: &ScenarioConfig, args: &[String]) {
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let real = sample_paths(cfg, seed).unwrap();
    for n_e in [5usize, 15, 30, 60] {
        let gml = GmlConfig {
            n_i: 10,
            n_o: 1,
            n_e,
            hidden: 64,
            ..GmlConfig::default()
        };
        let (sol, _) = fdisac::gml::run(
            cfg,
            &real,
            &gml,
            seed,
            FrozenGroups::default(),
            SiForm::Quadratic,
        )
        .unwrap();
        println!(
            "n_e {n_e:3}: lambda {:7.3} feasible {} p_u {:?} r_u {:?}",
            sol.lambda_t,
            sol.feasible,
            sol.state.p_u.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            sol.report.r_u.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>(),
        );
    }
}

fn dynamics(cfg: &ScenarioConfig, args: &[String]) {
    use fdisac::diffcore::Graph;
    use fdisac::gml::{
        epoch_forward, inner_cycle, BestTracker, IsacProblem, LearnerNetwork, LearnerVars,
        MetaProblem,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let n_probe: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let real = sample_paths(cfg, seed).unwrap();
    let gml = GmlConfig {
        n_i: 10,
        n_o: 1,
        n_e: 1,
        hidden: 64,
        ..GmlConfig::default()
    };
    let problem = IsacProblem::new(
        cfg.clone(),
        real,
        gml.penalty_mode,
        SiForm::Quadratic,
        FrozenGroups::default(),
    );
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let init = problem.initial_state(&mut rng).unwrap();
    let mut nets: Vec<LearnerNetwork> = problem
        .block_specs()
        .iter()
        .map(|s| LearnerNetwork::new(s.network_id, s.len, gml.hidden, gml.step_scale, &mut rng))
        .collect();
    let mut adams: Vec<fdisac::gml::AdamState> =
        nets.iter().map(|n| fdisac::gml::AdamState::new(n.param_count())).collect();

    let mut g = Graph::new();
    for epoch in 0..n_probe {
        g.clear();
        let nv: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
        let init_vars: Vec<Vec<fdisac::diffcore::Var>> = init.iter().map(|b| g.leaves(b)).collect();

        // Walk one outer iteration manually to record p_u per cycle.
        let mut state = init_vars.clone();
        let mut pu_path = Vec::new();
        for _ in 0..gml.n_i {
            inner_cycle(&problem, &mut g, &nv, &mut state).unwrap();
            pu_path.push(g.values(&state[0]));
        }
        let vals: Vec<Vec<f64>> = state.iter().map(|b| g.values(b)).collect();
        let eval = problem.evaluate_candidate(&vals).unwrap();

        // Fresh epoch for the actual training step.
        g.clear();
        let nv: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
        let init_vars: Vec<Vec<fdisac::diffcore::Var>> = init.iter().map(|b| g.leaves(b)).collect();
        let mut tracker = BestTracker::new();
        let loss = epoch_forward(&problem, &mut g, &nv, &init_vars, &gml, &mut tracker).unwrap();
        let adj = g.backward_numeric(loss);
        for (net, (vars, adam)) in nets.iter_mut().zip(nv.iter().zip(adams.iter_mut())) {
            let grads: Vec<f64> = vars.all_vars().iter().map(|v| adj[v.index()]).collect();
            let mut params = net.params();
            adam.step(&mut params, &grads, gml.meta_lr);
            net.set_params(&params);
        }
        println!(
            "epoch {epoch:2}: loss {:9.3} lambda {:7.3} feas {} pu@cycles {:?}",
            g.value(loss),
            eval.objective,
            eval.feasible,
            pu_path
                .iter()
                .map(|p| format!("[{:.3},{:.3}]", p[0], p[1]))
                .collect::<Vec<_>>()
        );
    }
}

fn nlp_stats(cfg: &ScenarioConfig) {
    let spec = SolverSpec::default();
    let t0 = std::time::Instant::now();
    let results: Vec<_> = (0..8u64)
        .into_par_iter()
        .map(|seed| {
            let real = sample_paths(cfg, seed).unwrap();
            let sol = solve_nlp(cfg, &real, &spec, seed).unwrap();
            (seed, sol)
        })
        .collect();
    for (seed, sol) in &results {
        println!(
            "seed {seed}: nlp lambda {:8.3} feasible {}",
            sol.lambda_t, sol.feasible
        );
    }
    println!("total {:.1}s for 8 nlp solves", t0.elapsed().as_secs_f64());
    let _ = solve_scheme; // keep the import exercised
}

// Appended probe: watch p_u across epochs (mode "pu").
