//! Training configuration, the fit pipeline (EM, regression, KMP) and the
//! on-disk model format.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demonstrations::{Dims, TrainingSet};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, GoalSet};
use crate::gmm::{build_reference_set, default_regularization, em_fit_with, EmOptions, FitSummary, GmmModel, ReferenceSet};
use crate::kmp::{KmpHyperparams, KmpModel};
use crate::rollout::{RolloutConfig, ContextSchedule};
use crate::scalar::{vector_from_f64, vector_to_f64, Scalar};

pub const MODEL_VERSION: u32 = 1;

/// Gain time constant of the context preset.
pub const CONTEXT_GAIN_DT: f64 = 5.0;

/// Flat run configuration; field names follow the hyperparameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Mixture components.
    #[serde(rename = "C")]
    pub components: usize,
    /// Reference points.
    #[serde(rename = "N")]
    pub n_refs: usize,
    pub lambda: f64,
    pub l_c: f64,
    pub l_p: f64,
    #[serde(rename = "K_s")]
    pub k_sp: f64,
    #[serde(rename = "K_g")]
    pub k_g: f64,
    pub pi_sp: f64,
    pub gamma_sigma: f64,
    pub gamma_grad: f64,
    /// Euler integration step of rollouts.
    pub dt: f64,
    /// Time constant dividing the stabilizing and goal gains.
    pub gain_dt: f64,
    pub grad_eps: f64,
    pub sigma_sp: f64,
    pub sigma_g: f64,
    pub jitter: f64,
    /// EM diagonal regularizer; `None` means `1e-6` times the per-dimension variance.
    pub reg: Option<f64>,
    pub max_iters: usize,
    pub success_radius: f64,
    pub em_seed: u64,
    pub sample_seed: u64,
    pub start_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::lasa()
    }
}

impl TrainConfig {
    pub fn lasa() -> Self {
        let f = FusionParams::<f64>::default();
        TrainConfig {
            components: 20,
            n_refs: 500,
            lambda: 0.5,
            l_c: 0.06,
            l_p: 0.04,
            k_sp: f.k_sp,
            k_g: f.k_g,
            pi_sp: f.pi_sp,
            gamma_sigma: f.gamma_sigma,
            gamma_grad: f.gamma_grad,
            dt: crate::rollout::DEFAULT_DT,
            gain_dt: f.dt,
            grad_eps: f.grad_eps,
            sigma_sp: f.sigma_sp,
            sigma_g: f.sigma_g,
            jitter: crate::kmp::DEFAULT_JITTER,
            reg: None,
            max_iters: crate::rollout::DEFAULT_MAX_ITERS,
            success_radius: crate::rollout::DEFAULT_SUCCESS_RADIUS,
            em_seed: 1,
            sample_seed: 2,
            start_seed: 3,
        }
    }

    pub fn context() -> Self {
        TrainConfig { components: 35, n_refs: 1000, gain_dt: CONTEXT_GAIN_DT, ..Self::lasa() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.n_refs == 0 {
            return Err(Error::Config("C and N must be at least 1".into()));
        }
        if !(self.l_c > 0.0) || !(self.l_p > 0.0) {
            return Err(Error::Config("kernel lengths must be positive".into()));
        }
        if let Some(r) = self.reg {
            if !(r >= 0.0) {
                return Err(Error::Config("reg must be non-negative".into()));
            }
        }
        self.fusion::<f64>().validate()?;
        self.rollout_template::<f64>(DVector::zeros(0)).validate()?;
        self.hyperparams::<f64>(Dims { context: 1, position: 1 }).validate()
    }

    pub fn fusion<T: Scalar>(&self) -> FusionParams<T> {
        FusionParams {
            pi_sp: T::of(self.pi_sp),
            k_sp: T::of(self.k_sp),
            k_g: T::of(self.k_g),
            gamma_sigma: T::of(self.gamma_sigma),
            gamma_grad: T::of(self.gamma_grad),
            dt: T::of(self.gain_dt),
            grad_eps: T::of(self.grad_eps),
            sigma_sp: T::of(self.sigma_sp),
            sigma_g: T::of(self.sigma_g),
        }
    }

    pub fn hyperparams<T: Scalar>(&self, dims: Dims) -> KmpHyperparams<T> {
        let mut h = KmpHyperparams::grouped(T::of(self.lambda), dims.context, dims.position, T::of(self.l_c), T::of(self.l_p));
        h.jitter = T::of(self.jitter);
        h
    }

    /// Rollout settings with the given start and no context.
    pub fn rollout_template<T: Scalar>(&self, x0: DVector<T>) -> RolloutConfig<T> {
        RolloutConfig {
            x0,
            schedule: ContextSchedule::None,
            max_iters: self.max_iters,
            success_radius: T::of(self.success_radius),
            dt: T::of(self.dt),
            seed: self.start_seed,
        }
    }

    /// Stable JSON form used for hashing and manifests.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// This config with the keys of `overrides` replaced; unknown keys are schema errors.
    pub fn merged(&self, overrides: &serde_json::Map<String, serde_json::Value>) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let map = v.as_object_mut().expect("config is an object");
        for (k, val) in overrides {
            map.insert(k.clone(), val.clone());
        }
        Self::from_json(&v.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub em: Duration,
    pub references: Duration,
    pub kmp: Duration,
}

/// Everything needed to run the fused policy for one skill.
#[derive(Debug, Clone)]
pub struct TrainedModel<T: Scalar> {
    pub config: TrainConfig,
    pub dims: Dims,
    pub gmm: GmmModel<T>,
    pub kmp: KmpModel<T>,
    pub goals: GoalSet<T>,
    /// First input `[c; x]` of every demonstration.
    pub demo_starts: Vec<DVector<T>>,
    pub demo_positions: Vec<DVector<T>>,
}

impl<T: Scalar> TrainedModel<T> {
    pub fn fusion(&self) -> FusionParams<T> {
        self.config.fusion()
    }
}

fn stage<R>(name: &'static str, r: Result<R>) -> Result<R> {
    r.map_err(|e| {
        log::error!("{name} stage failed: {e}");
        Error::Stage { stage: name, source: Box::new(e) }
    })
}

pub fn train<T: Scalar>(set: &TrainingSet<T>, config: &TrainConfig) -> Result<(TrainedModel<T>, StageTimings)> {
    config.validate()?;
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let reg = match config.reg {
        Some(r) => DVector::from_element(set.dims.input() + set.dims.output(), T::of(r)),
        None => default_regularization(&set.samples),
    };
    let opts = EmOptions {
        components: config.components,
        seed: config.em_seed,
        reg,
        tolerance: crate::gmm::EM_TOLERANCE,
        max_iterations: crate::gmm::EM_MAX_ITERATIONS,
    };
    let gmm = stage("em", em_fit_with(&set.samples, &opts))?;
    timings.em = t.elapsed();
    let t = Instant::now();
    let refs = stage("references", build_reference_set(&gmm, config.n_refs, config.sample_seed))?;
    timings.references = t.elapsed();
    let t = Instant::now();
    let kmp = stage("kmp", KmpModel::fit(refs, config.hyperparams(set.dims)))?;
    timings.kmp = t.elapsed();
    Ok((
        TrainedModel {
            config: config.clone(),
            dims: set.dims,
            gmm,
            kmp,
            goals: set.goals(),
            demo_starts: set.demonstrations.iter().map(|d| d.input(0)).collect(),
            demo_positions: set.positions().cloned().collect(),
        },
        timings,
    ))
}

// ---------------------------------------------------------------------------
// Model file

type Matrix = Vec<Vec<f64>>;

fn matrix_to_rows<T: Scalar>(m: &DMatrix<T>) -> Matrix {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].to_f64_lossy()).collect()).collect()
}

fn rows_to_matrix<T: Scalar>(rows: &Matrix, n: usize, what: &str) -> Result<DMatrix<T>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(format!("{what} must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| T::of(rows[i][j])))
}

fn vectors_to_f64<T: Scalar>(v: &[DVector<T>]) -> Matrix {
    v.iter().map(vector_to_f64).collect()
}

fn vectors_from_f64<T: Scalar>(v: &Matrix, dim: usize, what: &str) -> Result<Vec<DVector<T>>> {
    v.iter()
        .map(|x| {
            if x.len() != dim {
                Err(Error::DimensionMismatch(format!("{what} entries must have {dim} values")))
            } else {
                Ok(vector_from_f64(x))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmFile {
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub reseeded: usize,
    pub log_likelihood: Vec<f64>,
    pub weights: Vec<f64>,
    pub means: Matrix,
    pub covariances: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmpFile {
    pub lambda: f64,
    pub lengths: Vec<f64>,
    pub requested_jitter: f64,
    pub jitter: f64,
    pub reg_jitter: f64,
    pub inputs: Matrix,
    pub means: Matrix,
    pub covariances: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub dims: Dims,
    pub config: TrainConfig,
    pub gmm: GmmFile,
    pub kmp: KmpFile,
    pub goal_inputs: Matrix,
    pub goal_positions: Matrix,
    pub demo_starts: Matrix,
    pub demo_positions: Matrix,
}

impl<T: Scalar> TrainedModel<T> {
    pub fn to_file(&self) -> ModelFile {
        let refs = self.kmp.references();
        let hyper = self.kmp.hyperparams();
        ModelFile {
            version: MODEL_VERSION,
            dims: self.dims,
            config: self.config.clone(),
            gmm: GmmFile {
                seed: self.gmm.fit.seed,
                iterations: self.gmm.fit.iterations,
                converged: self.gmm.fit.converged,
                reseeded: self.gmm.fit.reseeded,
                log_likelihood: self.gmm.fit.log_likelihood.clone(),
                weights: vector_to_f64(&self.gmm.weights),
                means: vectors_to_f64(&self.gmm.means),
                covariances: self.gmm.covariances.iter().map(matrix_to_rows).collect(),
            },
            kmp: KmpFile {
                lambda: hyper.lambda.to_f64_lossy(),
                lengths: vector_to_f64(&hyper.lengths),
                requested_jitter: hyper.jitter.to_f64_lossy(),
                jitter: self.kmp.jitter().to_f64_lossy(),
                reg_jitter: self.kmp.reg_jitter().to_f64_lossy(),
                inputs: vectors_to_f64(&refs.inputs),
                means: vectors_to_f64(&refs.means),
                covariances: refs.covariances.iter().map(matrix_to_rows).collect(),
            },
            goal_inputs: vectors_to_f64(&self.goals.inputs),
            goal_positions: vectors_to_f64(&self.goals.positions),
            demo_starts: vectors_to_f64(&self.demo_starts),
            demo_positions: vectors_to_f64(&self.demo_positions),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("model serializes")
    }

    /// Rebuilds the factorizations from the stored reference set.
    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.version != MODEL_VERSION {
            return Err(Error::Schema { field: "version".into(), message: format!("unsupported model version {}", file.version) });
        }
        let dims = file.dims;
        let (i, o) = (dims.input(), dims.output());
        let d = i + o;
        let g = &file.gmm;
        if g.weights.len() != g.means.len() || g.weights.len() != g.covariances.len() {
            return Err(Error::DimensionMismatch("mixture arrays differ in length".into()));
        }
        let gmm = GmmModel {
            weights: vector_from_f64(&g.weights),
            means: vectors_from_f64(&g.means, d, "gmm.means")?,
            covariances: g.covariances.iter().map(|c| rows_to_matrix(c, d, "gmm covariance")).collect::<Result<_>>()?,
            input_dim: i,
            output_dim: o,
            fit: FitSummary {
                seed: g.seed,
                iterations: g.iterations,
                log_likelihood: g.log_likelihood.clone(),
                reseeded: g.reseeded,
                converged: g.converged,
            },
        };
        let k = &file.kmp;
        let refs = ReferenceSet {
            inputs: vectors_from_f64(&k.inputs, i, "kmp.inputs")?,
            means: vectors_from_f64(&k.means, o, "kmp.means")?,
            covariances: k.covariances.iter().map(|c| rows_to_matrix(c, o, "reference covariance")).collect::<Result<_>>()?,
            input_dim: i,
            output_dim: o,
        };
        if k.lengths.len() != i {
            return Err(Error::DimensionMismatch(format!("kmp.lengths must have {i} values")));
        }
        let hyper = KmpHyperparams { lambda: T::of(k.lambda), lengths: vector_from_f64(&k.lengths), jitter: T::of(k.requested_jitter) };
        let kmp = KmpModel::fit(refs, hyper)?;
        if (kmp.jitter().to_f64_lossy() - k.jitter).abs() > k.jitter.abs() * 1e-6 {
            log::warn!("rebuilt jitter {:e} differs from recorded {:e}", kmp.jitter().to_f64_lossy(), k.jitter);
        }
        let goals = GoalSet {
            inputs: vectors_from_f64(&file.goal_inputs, i, "goal_inputs")?,
            positions: vectors_from_f64(&file.goal_positions, o, "goal_positions")?,
            context_dim: dims.context,
        };
        if goals.inputs.len() != goals.positions.len() || goals.is_empty() {
            return Err(Error::DimensionMismatch("goal inputs and positions differ in count".into()));
        }
        Ok(TrainedModel {
            config: file.config,
            dims,
            gmm,
            kmp,
            goals,
            demo_starts: vectors_from_f64(&file.demo_starts, i, "demo_starts")?,
            demo_positions: vectors_from_f64(&file.demo_positions, o, "demo_positions")?,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ModelFile = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Schema { field: e.path().to_string(), message: e.inner().to_string() })?;
        Self::from_file(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
