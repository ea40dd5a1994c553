use ctxkmp::demonstrations::{Demonstration, TrainingSet};
use ctxkmp::experiment::{build_trials, evaluate_strategies};
use ctxkmp::pipeline::{train, TrainConfig, TrainedModel, CONTEXT_GAIN_DT};
use ctxkmp::rollout::{rollout, vector_field_grid, ContextSchedule, RolloutConfig, RolloutStepper};
use ctxkmp::{ErrorKind, GridSpec, RolloutStatus, StartMode, Strategy};
use nalgebra::{dvector, DVector};
use std::sync::OnceLock;

fn line(from: [f64; 2], to: [f64; 2], n: usize) -> Vec<DVector<f64>> {
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let s = 3.0 * t * t - 2.0 * t * t * t;
            dvector![from[0] + (to[0] - from[0]) * s, from[1] + (to[1] - from[1]) * s]
        })
        .collect()
}

/// Context 0 heads for the origin, context 1 for (0.4, 0).
fn two_skills() -> TrainingSet<f64> {
    let demo = |id: &str, to: [f64; 2], c: f64| Demonstration {
        id: id.into(),
        dt: 0.05,
        positions: line([0.2, 0.3], to, 60),
        contexts: Some(vec![dvector![c]; 60]),
    };
    TrainingSet::from_demonstrations(vec![demo("left", [0.0, 0.0], 0.0), demo("right", [0.4, 0.0], 1.0)]).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig { components: 4, n_refs: 120, gain_dt: CONTEXT_GAIN_DT, ..TrainConfig::lasa() }
}

fn model() -> &'static TrainedModel<f64> {
    static MODEL: OnceLock<TrainedModel<f64>> = OnceLock::new();
    MODEL.get_or_init(|| train(&two_skills(), &config()).unwrap().0)
}

fn run(m: &TrainedModel<f64>, x0: DVector<f64>, schedule: ContextSchedule<f64>, strategy: Strategy) -> ctxkmp::rollout::RolloutResult<f64> {
    let config = RolloutConfig { schedule, ..m.config.rollout_template(x0) };
    rollout(&m.kmp, &m.goals, &m.fusion(), &config, strategy).unwrap()
}

#[test]
fn each_context_reaches_its_own_goal() {
    let m = model();
    for (c, goal) in [(0.0, dvector![0.0, 0.0]), (1.0, dvector![0.4, 0.0])] {
        let r = run(m, dvector![0.22, 0.28], ContextSchedule::Constant(dvector![c]), Strategy::Full);
        assert!(r.success, "context {c}: {:?}", r.status);
        let last = r.trace.last().unwrap().input.rows(1, 2).into_owned();
        assert!((last - goal).norm() < m.config.success_radius);
    }
}

#[test]
fn external_stepping_replays_a_piecewise_schedule() {
    let m = model();
    let switch = 12;
    let x0 = dvector![0.2, 0.3];
    let offline = run(m, x0.clone(), ContextSchedule::Piecewise(vec![(0, dvector![0.0]), (switch, dvector![1.0])]), Strategy::Full);

    let config = RolloutConfig { schedule: ContextSchedule::External, ..m.config.rollout_template(x0) };
    let params = m.fusion();
    let mut stepper = RolloutStepper::new(&m.kmp, &m.goals, &config, Strategy::Full).unwrap();
    let mut trace = Vec::new();
    while !stepper.status().is_terminal() {
        let c = if stepper.iteration() < switch { dvector![0.0] } else { dvector![1.0] };
        trace.push(stepper.step(&m.kmp, &m.goals, &params, &c).unwrap());
    }
    assert_eq!(trace, offline.trace);
    assert_eq!(stepper.status(), offline.status);
    assert_eq!(offline.trace.last().unwrap().coefficients.goal_index, 1);
}

#[test]
fn starting_on_the_goal_succeeds_immediately() {
    let m = model();
    let trials = build_trials(m, StartMode::OnDemos, &[]).unwrap();
    assert_eq!(trials.len(), 2);
    let mut at_goal = trials[0].clone();
    at_goal.x0 = m.goals.positions[0].clone();
    let reports = evaluate_strategies(m, &[at_goal], &Strategy::ALL).unwrap();
    for r in reports {
        assert_eq!((r.successes, r.trials, r.avg_iterations), (1, 1, 0.0), "{}", r.strategy);
        assert_eq!(r.rms, 0.0);
    }
}

#[test]
fn trial_construction() {
    let m = model();
    let contexts = [dvector![0.0], dvector![1.0]];
    let t = build_trials(m, StartMode::Random(5), &contexts).unwrap();
    assert_eq!(t.len(), 10);
    assert_eq!(t[0].x0, t[5].x0);
    assert_eq!(t[0].schedule, ContextSchedule::Constant(dvector![0.0]));
    assert_eq!(t[5].schedule, ContextSchedule::Constant(dvector![1.0]));
    assert_eq!(build_trials(m, StartMode::Random(5), &[]).unwrap_err().kind(), ErrorKind::Usage);
    assert!(build_trials(m, StartMode::OnDemos, &[dvector![0.0, 1.0]]).is_err());
}

#[test]
fn vector_field_is_row_major_and_context_dependent() {
    let m = model();
    let grid = GridSpec { x_min: 0.0, x_max: 0.4, y_min: 0.0, y_max: 0.3, nx: 3, ny: 2 };
    let a = vector_field_grid(&m.kmp, &m.goals, &m.fusion(), &grid, &dvector![0.0], Strategy::Full).unwrap();
    let xy: Vec<(f64, f64)> = a.iter().map(|r| (r.x, r.y)).collect();
    assert_eq!(xy, vec![(0.0, 0.0), (0.2, 0.0), (0.4, 0.0), (0.0, 0.3), (0.2, 0.3), (0.4, 0.3)]);
    for r in &a {
        let s = dvector![0.0, r.x, r.y];
        assert_eq!(r.sigma_ep, m.kmp.epistemic(&s).unwrap());
    }
    let b = vector_field_grid(&m.kmp, &m.goals, &m.fusion(), &grid, &dvector![1.0], Strategy::Full).unwrap();
    assert_ne!(a, b);
    let bad = vector_field_grid(&m.kmp, &m.goals, &m.fusion(), &grid, &dvector![0.0, 0.0], Strategy::Full);
    assert_eq!(bad.unwrap_err().kind(), ErrorKind::Data);
}

#[test]
fn saved_models_roll_out_identically() {
    let m = model();
    let reloaded = TrainedModel::<f64>::from_json(&m.to_json()).unwrap();
    assert_eq!(reloaded.to_json(), m.to_json());
    let schedule = ContextSchedule::Constant(dvector![1.0]);
    let a = run(m, dvector![0.3, 0.1], schedule.clone(), Strategy::Full);
    let b = run(&reloaded, dvector![0.3, 0.1], schedule, Strategy::Full);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn kmp_alone_stalls_where_the_full_policy_recovers() {
    let m = model();
    let far = dvector![0.3, 0.4];
    let kmp = run(m, far.clone(), ContextSchedule::Constant(dvector![0.0]), Strategy::Kmp);
    let full = run(m, far, ContextSchedule::Constant(dvector![0.0]), Strategy::Full);
    assert_eq!(kmp.status, RolloutStatus::Failed);
    assert!(full.success);
}

#[test]
fn single_precision_pipeline_tracks_double() {
    let set64 = two_skills();
    let demos32: Vec<Demonstration<f32>> = set64
        .demonstrations
        .iter()
        .map(|d| Demonstration {
            id: d.id.clone(),
            dt: d.dt as f32,
            positions: d.positions.iter().map(|p| p.map(|v| v as f32)).collect(),
            contexts: d.contexts.as_ref().map(|c| c.iter().map(|v| v.map(|x| x as f32)).collect()),
        })
        .collect();
    let set32 = TrainingSet::from_demonstrations(demos32).unwrap();
    let cfg = TrainConfig { jitter: 1e-5, ..config() };
    let (m32, _) = train(&set32, &cfg).unwrap();
    let (m64, _) = train(&set64, &cfg).unwrap();
    for d in &set64.demonstrations {
        for (p, c) in d.positions.iter().zip(d.contexts.as_ref().unwrap()) {
            let s = dvector![c[0], p[0], p[1]];
            let a = m64.kmp.predict(&s).unwrap().mean;
            let b = m32.kmp.predict(&s.map(|v| v as f32)).unwrap().mean.map(|v| v as f64);
            assert!((a - b).amax() < 1e-2);
        }
    }
    let config = RolloutConfig { schedule: ContextSchedule::Constant(DVector::from_vec(vec![0.0f32])), ..cfg.rollout_template(DVector::from_vec(vec![0.22f32, 0.28])) };
    let r = rollout(&m32.kmp, &m32.goals, &m32.fusion(), &config, Strategy::Full).unwrap();
    assert_ne!(r.status, RolloutStatus::Diverged);
    assert!(r.trace.iter().all(|f| f.input.iter().all(|v| v.is_finite())));
}
