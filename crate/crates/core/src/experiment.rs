//! Start sets for the two evaluation protocols (demonstration starts and
//! random starts) and the synthetic context-letter preset.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;

use crate::demonstrations::{generate_context_letter_set, load_training_set, LetterTemplate, TrainingSet};
use crate::error::{Error, Result};
use crate::fusion::Strategy;
use crate::pipeline::TrainedModel;
use crate::rollout::{default_start_box, evaluate_trials, random_starts, ContextSchedule, EvalReport, Trial};
use crate::scalar::{vector_from_f64, Scalar};

/// LASA shapes used as the three letters of the context dataset.
pub const CONTEXT_LETTERS: [&str; 3] = ["Zshape", "Sshape", "JShape"];
pub const CONTEXT_CENTERS: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
pub const CONTEXT_CLUSTER_STD: f64 = 0.005;
pub const CONTEXT_DEMOS_PER_LETTER: usize = 7;
pub const CONTEXT_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    OnDemos,
    Random(usize),
}

impl fmt::Display for StartMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StartMode::OnDemos => f.write_str("on-demos"),
            StartMode::Random(n) => write!(f, "random:{n}"),
        }
    }
}

impl FromStr for StartMode {
    type Err = Error;

    /// Accepts `on-demos`, `random:N` and `random(N)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "on-demos" {
            return Ok(StartMode::OnDemos);
        }
        let n = s
            .strip_prefix("random:")
            .or_else(|| s.strip_prefix("random(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| Error::Input(format!("unknown start mode `{s}` (expected on-demos or random:N)")))?;
        match n.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(StartMode::Random(n)),
            _ => Err(Error::Input(format!("random start count must be a positive integer, got `{n}`"))),
        }
    }
}

/// Trials for one model.
///
/// With explicit `contexts`, every start is paired with every context
/// (contexts outer). Without them, demonstration starts keep their own
/// context and random starts are only allowed on context-free models.
pub fn build_trials<T: Scalar>(model: &TrainedModel<T>, mode: StartMode, contexts: &[DVector<T>]) -> Result<Vec<Trial<T>>> {
    let c = model.dims.context;
    let p = model.dims.position;
    if let Some(bad) = contexts.iter().find(|x| x.len() != c) {
        return Err(Error::Input(format!("context has {} values, model expects {c}", bad.len())));
    }
    let own: Vec<(DVector<T>, DVector<T>)> = match mode {
        StartMode::OnDemos => {
            model.demo_starts.iter().map(|s| (s.rows(c, p).into_owned(), s.rows(0, c).into_owned())).collect()
        }
        StartMode::Random(n) => {
            let bounds = default_start_box(&model.demo_positions)?;
            random_starts(&bounds, n, model.config.start_seed)?
                .into_iter()
                .map(|x| (x, DVector::zeros(c)))
                .collect()
        }
    };
    if c == 0 {
        if !contexts.is_empty() {
            return Err(Error::Input("model has no context inputs".into()));
        }
        return Ok(own.into_iter().map(|(x0, _)| Trial { x0, schedule: ContextSchedule::None }).collect());
    }
    if !contexts.is_empty() {
        return Ok(contexts
            .iter()
            .flat_map(|ctx| own.iter().map(move |(x0, _)| Trial { x0: x0.clone(), schedule: ContextSchedule::Constant(ctx.clone()) }))
            .collect());
    }
    match mode {
        StartMode::OnDemos => Ok(own.into_iter().map(|(x0, ctx)| Trial { x0, schedule: ContextSchedule::Constant(ctx) }).collect()),
        StartMode::Random(_) => Err(Error::Input(format!("random starts on a model with {c} context inputs need explicit contexts"))),
    }
}

/// One report per strategy, in the given order.
pub fn evaluate_strategies<T: Scalar>(model: &TrainedModel<T>, trials: &[Trial<T>], strategies: &[Strategy]) -> Result<Vec<EvalReport>> {
    let params = model.fusion();
    let template = model.config.rollout_template(DVector::zeros(model.dims.position));
    strategies
        .iter()
        .map(|&s| evaluate_trials(&model.kmp, &model.goals, &params, trials, s, &template, &model.demo_positions))
        .collect()
}

pub fn context_centers<T: Scalar>() -> Vec<DVector<T>> {
    CONTEXT_CENTERS.iter().map(|c| vector_from_f64(c)).collect()
}

/// Letter templates from corpus files, named after the file stem.
pub fn load_letters<T: Scalar>(paths: &[impl AsRef<Path>]) -> Result<Vec<LetterTemplate<T>>> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let set = load_training_set(p)?;
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "letter".into());
            Ok(LetterTemplate::from_training_set(name, &set))
        })
        .collect()
}

/// The default context dataset built from the LASA corpus in `lasa_dir`.
pub fn default_context_set<T: Scalar>(lasa_dir: impl AsRef<Path>) -> Result<TrainingSet<T>> {
    let dir = lasa_dir.as_ref();
    let paths: Vec<_> = CONTEXT_LETTERS.iter().map(|l| dir.join(format!("{l}.json"))).collect();
    let letters = load_letters(&paths)?;
    generate_context_letter_set(&letters, &context_centers(), T::of(CONTEXT_CLUSTER_STD), CONTEXT_DEMOS_PER_LETTER, CONTEXT_SEED)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_modes_parse() {
        assert_eq!("on-demos".parse::<StartMode>().unwrap(), StartMode::OnDemos);
        assert_eq!("random:10".parse::<StartMode>().unwrap(), StartMode::Random(10));
        assert_eq!("random(3)".parse::<StartMode>().unwrap(), StartMode::Random(3));
        assert!("random:0".parse::<StartMode>().is_err());
        assert!("everywhere".parse::<StartMode>().is_err());
        assert_eq!(StartMode::Random(4).to_string().parse::<StartMode>().unwrap(), StartMode::Random(4));
    }
}
