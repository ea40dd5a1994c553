use std::path::{Path, PathBuf};
use std::sync::Arc;

use ctxkmp::demonstrations::{generate_context_letter_set, load_training_set, save_training_set};
use ctxkmp::experiment::{build_trials, evaluate_strategies, load_letters, CONTEXT_LETTERS};
use ctxkmp::pipeline::{train, StageTimings};
use ctxkmp::rollout::{default_start_box, field_to_csv, reports_to_csv, rollout, vector_field_grid};
use ctxkmp::{ContextSchedule, EvalReport, GridSpec, RolloutConfig, RolloutStatus, TrainConfig, TrainedModel};
use nalgebra::DVector;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::args::{ConfigArgs, EvalArgs, FieldArgs, GenerateArgs, Preset, RolloutArgs, ServeArgs, TrainArgs};
use crate::CliError;

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    ctxkmp::Error::Io { path: path.display().to_string(), source }.into()
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn parse_vector(name: &str, s: &str) -> Result<DVector<f64>, CliError> {
    let values: Result<Vec<f64>, _> = s.split(',').map(|v| v.trim().parse::<f64>()).collect();
    match values {
        Ok(v) if v.iter().all(|x| x.is_finite()) => Ok(DVector::from_vec(v)),
        _ => Err(CliError::Usage(format!("--{name} expects comma-separated finite numbers, got `{s}`"))),
    }
}

pub fn parse_vectors(name: &str, s: &str) -> Result<Vec<DVector<f64>>, CliError> {
    s.split(';').filter(|p| !p.trim().is_empty()).map(|p| parse_vector(name, p)).collect()
}

/// `ITER:c1,c2;ITER:c1,c2`
pub fn parse_schedule(s: &str) -> Result<ContextSchedule, CliError> {
    let entries = s
        .split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (it, c) = p
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("schedule entry `{p}` must look like ITER:c1,c2")))?;
            let it = it.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad iteration in `{p}`")))?;
            Ok((it, parse_vector("schedule", c)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(ContextSchedule::Piecewise(entries))
}

pub fn config_hash(config: &TrainConfig) -> String {
    Sha256::digest(config.to_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Configuration

impl ConfigArgs {
    fn training_flags_set(&self) -> bool {
        self.components.is_some()
            || self.n_refs.is_some()
            || self.lambda.is_some()
            || self.l_c.is_some()
            || self.l_p.is_some()
            || self.jitter.is_some()
            || self.reg.is_some()
            || self.em_seed.is_some()
            || self.sample_seed.is_some()
    }

    fn apply_runtime(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(k_sp, k_g, pi_sp, gamma_sigma, gamma_grad, dt, gain_dt, grad_eps, sigma_sp, sigma_g, max_iters, success_radius, start_seed);
    }

    /// Preset, then config file, then flags.
    pub fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut c = match self.preset.unwrap_or_default() {
            Preset::Lasa => TrainConfig::lasa(),
            Preset::Context => TrainConfig::context(),
        };
        if let Some(path) = &self.config {
            c = c.merged(&read_config_object(path)?)?;
        }
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(components, n_refs, lambda, l_c, l_p, jitter, em_seed, sample_seed);
        if self.reg.is_some() {
            c.reg = self.reg;
        }
        self.apply_runtime(&mut c);
        c.validate()?;
        Ok(c)
    }

    /// Run-time overrides on top of a trained model's config.
    pub fn resolve_for_model(&self, model_config: &TrainConfig) -> Result<TrainConfig, CliError> {
        if self.preset.is_some() || self.config.is_some() || self.training_flags_set() {
            return Err(CliError::Usage(
                "training options (preset, config file, C, N, lambda, lengths, jitter, reg, EM/sample seeds) have no effect on a trained model".into(),
            ));
        }
        let mut c = model_config.clone();
        self.apply_runtime(&mut c);
        c.validate()?;
        Ok(c)
    }
}

fn read_config_object(path: &Path) -> Result<serde_json::Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| ctxkmp::Error::Schema { field: path.display().to_string(), message: e.to_string() })?;
    let Value::Object(mut map) = v else {
        return Err(ctxkmp::Error::Schema { field: path.display().to_string(), message: "expected a JSON object".into() }.into());
    };
    // a train manifest carries its config under `config`
    if map.contains_key("config_hash") {
        if let Some(Value::Object(inner)) = map.remove("config") {
            return Ok(inner);
        }
    }
    Ok(map)
}

fn load_model(path: &Path, args: &ConfigArgs) -> Result<TrainedModel, CliError> {
    let mut model = TrainedModel::load(path)?;
    model.config = args.resolve_for_model(&model.config)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_generate_context(args: &GenerateArgs, out_dir: &Path) -> Result<PathBuf, CliError> {
    let paths: Vec<PathBuf> = match &args.letters {
        Some(l) => l.clone(),
        None => CONTEXT_LETTERS.iter().map(|l| args.lasa_dir.join(format!("{l}.json"))).collect(),
    };
    let letters = load_letters::<f64>(&paths)?;
    let centers = parse_vectors("centers", &args.centers)?;
    let set = generate_context_letter_set(&letters, &centers, args.cluster_std, args.demos_per_letter, args.seed)?;
    let output = args.output.clone().unwrap_or_else(|| out_dir.join("context_letters.json"));
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    save_training_set(&set, &output)?;
    Ok(output)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: PathBuf,
    pub manifest: PathBuf,
}

fn manifest(dataset: &Path, model_path: &Path, model: &TrainedModel, timings: &StageTimings) -> Value {
    let c = &model.config;
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    json!({
        "dataset": dataset.display().to_string(),
        "model": model_path.display().to_string(),
        "config": c,
        "config_hash": config_hash(c),
        "seeds": { "em": c.em_seed, "sample": c.sample_seed, "start": c.start_seed },
        "jitter": {
            "requested": c.jitter,
            "used": model.kmp.jitter(),
            "regularized": model.kmp.reg_jitter(),
        },
        "em": {
            "iterations": model.gmm.fit.iterations,
            "converged": model.gmm.fit.converged,
            "reseeded": model.gmm.fit.reseeded,
            "log_likelihood": model.gmm.fit.log_likelihood.last(),
        },
        "timings_ms": { "em": ms(timings.em), "references": ms(timings.references), "kmp": ms(timings.kmp) },
    })
}

pub fn cmd_train(args: &TrainArgs, out_dir: &Path) -> Result<TrainOutput, CliError> {
    let config = args.config.resolve()?;
    let set = load_training_set::<f64>(&args.dataset)?;
    let (model, timings) = train(&set, &config)?;
    let name = args
        .name
        .clone()
        .or_else(|| args.dataset.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".into());
    let model_path = out_dir.join(format!("{name}.model.json"));
    let manifest_path = out_dir.join(format!("{name}.manifest.json"));
    write_file(&model_path, &model.to_json())?;
    let m = manifest(&args.dataset, &model_path, &model, &timings);
    write_file(&manifest_path, &serde_json::to_string_pretty(&m).expect("serializable"))?;
    log::info!("trained {} in {:?}", args.dataset.display(), timings.em + timings.references + timings.kmp);
    Ok(TrainOutput { model: model_path, manifest: manifest_path })
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub reports: Vec<EvalReport>,
    pub csv: PathBuf,
    pub json: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs, out_dir: &Path) -> Result<EvalOutput, CliError> {
    if args.model.is_empty() && args.dataset.is_empty() {
        return Err(CliError::Usage("eval needs at least one --model or --dataset".into()));
    }
    if args.strategies.is_empty() {
        return Err(CliError::Usage("no strategies given".into()));
    }
    let contexts = match &args.contexts {
        Some(s) => parse_vectors("contexts", s)?,
        None => Vec::new(),
    };
    let mut sources = Vec::new();
    let mut per_strategy: Vec<Vec<EvalReport>> = vec![Vec::new(); args.strategies.len()];
    let mut run = |label: String, model: &TrainedModel| -> Result<(), CliError> {
        let trials = build_trials(model, args.starts, &contexts)?;
        let reports = evaluate_strategies(model, &trials, &args.strategies)?;
        sources.push(json!({
            "source": label,
            "trials": trials.len(),
            "reports": reports,
        }));
        for (acc, r) in per_strategy.iter_mut().zip(reports) {
            acc.push(r);
        }
        Ok(())
    };
    for path in &args.model {
        let model = load_model(path, &args.config)?;
        run(path.display().to_string(), &model)?;
    }
    if !args.dataset.is_empty() {
        let config = args.config.resolve()?;
        for path in &args.dataset {
            let set = load_training_set::<f64>(path)?;
            let (model, _) = train(&set, &config)?;
            run(path.display().to_string(), &model)?;
        }
    }
    let reports = per_strategy.iter().map(|r| EvalReport::pool(r)).collect::<Result<Vec<_>, _>>()?;
    let csv = args.output.clone().unwrap_or_else(|| out_dir.join("report.csv"));
    let json_path = csv.with_extension("json");
    write_file(&csv, &reports_to_csv(&reports))?;
    let summary = json!({ "starts": args.starts.to_string(), "pooled": reports, "sources": sources });
    write_file(&json_path, &serde_json::to_string_pretty(&summary).expect("serializable"))?;
    Ok(EvalOutput { reports, csv, json: json_path })
}

fn require_context(model: &TrainedModel, given: Option<&str>) -> Result<DVector<f64>, CliError> {
    let c = model.dims.context;
    match given {
        Some(s) => {
            let v = parse_vector("context", s)?;
            if v.len() != c {
                return Err(CliError::Usage(format!("--context has {} values, model expects {c}", v.len())));
            }
            Ok(v)
        }
        None if c == 0 => Ok(DVector::zeros(0)),
        None => Err(CliError::Usage(format!("model has {c} context inputs; pass --context"))),
    }
}

pub fn cmd_field(args: &FieldArgs, out_dir: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    let model = load_model(&args.model, &args.config)?;
    let context = require_context(&model, args.context.as_deref())?;
    let grid = match &args.bounds {
        Some(b) => {
            let v = parse_vector("bounds", b)?;
            if v.len() != 4 {
                return Err(CliError::Usage("--bounds expects x_min,x_max,y_min,y_max".into()));
            }
            GridSpec { x_min: v[0], x_max: v[1], y_min: v[2], y_max: v[3], nx: args.nx, ny: args.ny }
        }
        None => GridSpec::covering(&default_start_box(&model.demo_positions)?, args.nx, args.ny),
    };
    let records = vector_field_grid(&model.kmp, &model.goals, &model.fusion(), &grid, &context, args.strategy)?;
    let prefix = args.output.clone().unwrap_or_else(|| out_dir.join("field"));
    let csv = prefix.with_extension("csv");
    let json_path = prefix.with_extension("json");
    write_file(&csv, &field_to_csv(&records))?;
    let payload = json!({
        "strategy": args.strategy.name(),
        "context": context.as_slice(),
        "grid": grid,
        "records": records,
    });
    write_file(&json_path, &serde_json::to_string(&payload).expect("serializable"))?;
    Ok((csv, json_path))
}

pub fn cmd_rollout(args: &RolloutArgs, out_dir: &Path) -> Result<PathBuf, CliError> {
    let model = load_model(&args.model, &args.config)?;
    let x0 = parse_vector("x0", &args.x0)?;
    let schedule = match (&args.schedule, model.dims.context) {
        (Some(s), _) => parse_schedule(s)?,
        (None, 0) => {
            require_context(&model, args.context.as_deref())?;
            ContextSchedule::None
        }
        (None, _) => ContextSchedule::Constant(require_context(&model, args.context.as_deref())?),
    };
    let config = RolloutConfig { schedule, ..model.config.rollout_template(x0) };
    let result = rollout(&model.kmp, &model.goals, &model.fusion(), &config, args.strategy)?;
    let trace: Vec<Value> = result
        .trace
        .iter()
        .map(|t| {
            let c = &t.coefficients;
            json!({
                "iteration": t.iteration,
                "s": t.input.as_slice(),
                "action": t.action.as_slice(),
                "coefficients": { "pi_kmp": c.pi_kmp, "pi_sp": c.pi_sp, "pi_g": c.pi_g, "k_max": c.k_max, "goal_index": c.goal_index },
                "epistemic": t.epistemic,
            })
        })
        .collect();
    let out = json!({
        "strategy": args.strategy.name(),
        "status": result.status,
        "success": result.success,
        "iterations": result.iterations,
        "terminal_distance": Some(result.terminal_distance).filter(|d| d.is_finite()),
        "trace": trace,
    });
    let path = args.output.clone().unwrap_or_else(|| out_dir.join("rollout.json"));
    write_file(&path, &serde_json::to_string(&out).expect("serializable"))?;
    if result.status == RolloutStatus::Diverged {
        return Err(ctxkmp::Error::Diverged { iteration: result.trace.len().saturating_sub(1) }.into());
    }
    Ok(path)
}

pub fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    let config = ctxkmp_service::ServiceConfig {
        capacity: args.capacity,
        store_dir: args.store_dir.clone(),
        rate_hz: args.rate_hz,
        defaults: args.config.resolve()?,
        ..Default::default()
    };
    let state: Arc<_> = ctxkmp_service::AppState::new(config)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| io_error(Path::new("tokio runtime"), e))?;
    runtime.block_on(async {
        let (listener, addr) = ctxkmp_service::bind(&args.bind).await.map_err(|e| io_error(Path::new(&args.bind), e))?;
        log::info!("listening on http://{addr}");
        println!("listening on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        ctxkmp_service::serve_with_shutdown(listener, state, shutdown).await.map_err(|e| io_error(Path::new(&args.bind), e))
    })
}
