//! Demonstrated trajectories, the JSON corpus format, and the derived
//! training set of `(input, velocity)` samples.
//!
//! An input is the concatenation `[context, position]`; the output is the
//! Cartesian velocity, so `I = C + P` and `O = P`.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, vector_from_f64, vector_to_f64, Scalar};

pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration<T: Scalar> {
    pub id: String,
    pub dt: T,
    pub positions: Vec<DVector<T>>,
    pub contexts: Option<Vec<DVector<T>>>,
}

impl<T: Scalar> Demonstration<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn context_dim(&self) -> usize {
        self.contexts.as_ref().and_then(|c| c.first()).map_or(0, |c| c.len())
    }

    pub fn position_dim(&self) -> usize {
        self.positions.first().map_or(0, |p| p.len())
    }

    /// Input vector `[c, x]` of sample `m`.
    pub fn input(&self, m: usize) -> DVector<T> {
        match &self.contexts {
            Some(c) => stack(&c[m], &self.positions[m]),
            None => self.positions[m].clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() < 2 {
            return Err(Error::Data(format!(
                "demonstration `{}` has {} samples, need at least 2",
                self.id,
                self.positions.len()
            )));
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(Error::Data(format!("demonstration `{}` has non-positive dt", self.id)));
        }
        let p = self.position_dim();
        if p == 0 {
            return Err(Error::DimensionMismatch(format!("demonstration `{}` has empty positions", self.id)));
        }
        for (m, x) in self.positions.iter().enumerate() {
            if x.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "demonstration `{}` sample {m} has position dim {} (expected {p})",
                    self.id,
                    x.len()
                )));
            }
            if !all_finite(x) {
                return Err(Error::Data(format!("demonstration `{}` sample {m} is not finite", self.id)));
            }
        }
        if let Some(ctx) = &self.contexts {
            if ctx.len() != self.positions.len() {
                return Err(Error::DimensionMismatch(format!(
                    "demonstration `{}` has {} contexts for {} positions",
                    self.id,
                    ctx.len(),
                    self.positions.len()
                )));
            }
            let c = self.context_dim();
            for (m, v) in ctx.iter().enumerate() {
                if v.len() != c {
                    return Err(Error::DimensionMismatch(format!(
                        "demonstration `{}` sample {m} has context dim {} (expected {c})",
                        self.id,
                        v.len()
                    )));
                }
                if !all_finite(v) {
                    return Err(Error::Data(format!("demonstration `{}` context {m} is not finite", self.id)));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn stack<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Central differences in the interior, one-sided differences at both ends.
pub fn compute_velocities<T: Scalar>(demo: &Demonstration<T>) -> Result<Vec<DVector<T>>> {
    let x = &demo.positions;
    let n = x.len();
    if n < 2 {
        return Err(Error::Data(format!("demonstration `{}` needs at least 2 samples", demo.id)));
    }
    let dt = demo.dt;
    let two_dt = dt + dt;
    let mut out = Vec::with_capacity(n);
    out.push((&x[1] - &x[0]) / dt);
    for t in 1..n - 1 {
        out.push((&x[t + 1] - &x[t - 1]) / two_dt);
    }
    out.push((&x[n - 1] - &x[n - 2]) / dt);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub context: usize,
    pub position: usize,
}

impl Dims {
    pub fn input(&self) -> usize {
        self.context + self.position
    }

    pub fn output(&self) -> usize {
        self.position
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T: Scalar> {
    pub input: DVector<T>,
    pub output: DVector<T>,
}

/// Demonstrations plus everything derived from them for fitting.
#[derive(Debug, Clone)]
pub struct TrainingSet<T: Scalar> {
    pub demonstrations: Vec<Demonstration<T>>,
    pub samples: Vec<TrainingSample<T>>,
    pub dims: Dims,
    pub goal_inputs: Vec<DVector<T>>,
    pub goal_positions: Vec<DVector<T>>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn from_demonstrations(demonstrations: Vec<Demonstration<T>>) -> Result<Self> {
        let first = demonstrations
            .first()
            .ok_or_else(|| Error::Data("training set has no demonstrations".into()))?;
        let dims = Dims { context: first.context_dim(), position: first.position_dim() };
        let mut samples = Vec::new();
        let mut goal_inputs = Vec::with_capacity(demonstrations.len());
        let mut goal_positions = Vec::with_capacity(demonstrations.len());
        for demo in &demonstrations {
            demo.validate()?;
            let d = Dims { context: demo.context_dim(), position: demo.position_dim() };
            if d != dims || demo.contexts.is_some() != first.contexts.is_some() {
                return Err(Error::DimensionMismatch(format!(
                    "demonstration `{}` has dims (C={}, P={}) but `{}` has (C={}, P={}){}",
                    demo.id,
                    d.context,
                    d.position,
                    first.id,
                    dims.context,
                    dims.position,
                    if demo.contexts.is_some() != first.contexts.is_some() {
                        "; contexts present on some demonstrations only"
                    } else {
                        ""
                    }
                )));
            }
            let vel = compute_velocities(demo)?;
            for (m, v) in vel.into_iter().enumerate() {
                samples.push(TrainingSample { input: demo.input(m), output: v });
            }
            goal_inputs.push(demo.input(demo.len() - 1));
            goal_positions.push(demo.positions[demo.len() - 1].clone());
        }
        Ok(TrainingSet { demonstrations, samples, dims, goal_inputs, goal_positions })
    }

    pub fn goals(&self) -> crate::fusion::GoalSet<T> {
        crate::fusion::GoalSet {
            inputs: self.goal_inputs.clone(),
            positions: self.goal_positions.clone(),
            context_dim: self.dims.context,
        }
    }

    /// Every demonstrated position, in demonstration order.
    pub fn positions(&self) -> impl Iterator<Item = &DVector<T>> {
        self.demonstrations.iter().flat_map(|d| d.positions.iter())
    }

    pub fn to_corpus(&self) -> CorpusFile {
        CorpusFile {
            version: CORPUS_VERSION,
            dims: CorpusDims { context: self.dims.context, position: self.dims.position },
            demonstrations: self
                .demonstrations
                .iter()
                .map(|d| CorpusDemo {
                    id: d.id.clone(),
                    dt: d.dt.to_f64_lossy(),
                    positions: d.positions.iter().map(vector_to_f64).collect(),
                    contexts: d.contexts.as_ref().map(|c| c.iter().map(vector_to_f64).collect()),
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus file format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub version: u32,
    pub dims: CorpusDims,
    pub demonstrations: Vec<CorpusDemo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDims {
    pub context: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDemo {
    pub id: String,
    pub dt: f64,
    pub positions: Vec<Vec<f64>>,
    #[serde(default)]
    pub contexts: Option<Vec<Vec<f64>>>,
}

impl CorpusFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("corpus serialization is infallible")
    }

    /// Checks the declared header against the payload and builds the training set.
    pub fn into_training_set<T: Scalar>(self) -> Result<TrainingSet<T>> {
        if self.version != CORPUS_VERSION {
            return Err(Error::Schema {
                field: "version".into(),
                message: format!("unsupported corpus version {} (expected {CORPUS_VERSION})", self.version),
            });
        }
        let mut demos = Vec::with_capacity(self.demonstrations.len());
        for (h, d) in self.demonstrations.into_iter().enumerate() {
            for (m, p) in d.positions.iter().enumerate() {
                if p.len() != self.dims.position {
                    return Err(Error::DimensionMismatch(format!(
                        "demonstrations[{h}].positions[{m}] has {} values, header declares {}",
                        p.len(),
                        self.dims.position
                    )));
                }
            }
            match &d.contexts {
                Some(ctx) => {
                    for (m, c) in ctx.iter().enumerate() {
                        if c.len() != self.dims.context {
                            return Err(Error::DimensionMismatch(format!(
                                "demonstrations[{h}].contexts[{m}] has {} values, header declares {}",
                                c.len(),
                                self.dims.context
                            )));
                        }
                    }
                }
                None if self.dims.context > 0 => {
                    return Err(Error::DimensionMismatch(format!(
                        "demonstrations[{h}] has no contexts but header declares C={}",
                        self.dims.context
                    )));
                }
                None => {}
            }
            if !d.dt.is_finite() || d.dt <= 0.0 {
                return Err(Error::Data(format!("demonstrations[{h}].dt must be finite and positive")));
            }
            let contexts = d
                .contexts
                .map(|c| c.iter().map(|v| vector_from_f64(v)).collect::<Vec<_>>())
                .filter(|_| self.dims.context > 0);
            demos.push(Demonstration {
                id: d.id,
                dt: T::of(d.dt),
                positions: d.positions.iter().map(|v| vector_from_f64(v)).collect(),
                contexts,
            });
        }
        TrainingSet::from_demonstrations(demos)
    }
}

pub fn parse_training_set<T: Scalar>(text: &str) -> Result<TrainingSet<T>> {
    CorpusFile::from_json(text)?.into_training_set()
}

pub fn load_training_set<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainingSet<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_training_set(&text)
}

pub fn save_training_set<T: Scalar>(set: &TrainingSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.to_corpus().to_json()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic context dataset

/// One letter of the context dataset. Generated demonstration `j` reuses
/// `variants[j % variants.len()]` as its position trace.
#[derive(Debug, Clone)]
pub struct LetterTemplate<T: Scalar> {
    pub name: String,
    pub variants: Vec<Demonstration<T>>,
}

impl<T: Scalar> LetterTemplate<T> {
    pub fn from_training_set(name: impl Into<String>, set: &TrainingSet<T>) -> Self {
        LetterTemplate { name: name.into(), variants: set.demonstrations.clone() }
    }
}

/// Builds a context-labelled dataset: letter `i` is paired with contexts drawn
/// once per demonstration from `N(centers[i], std^2 I)` and held constant along it.
pub fn generate_context_letter_set<T: Scalar>(
    letters: &[LetterTemplate<T>],
    cluster_centers: &[DVector<T>],
    cluster_std: T,
    demos_per_letter: usize,
    seed: u64,
) -> Result<TrainingSet<T>> {
    if letters.len() < 3 {
        return Err(Error::Config(format!("need at least 3 letter templates, got {}", letters.len())));
    }
    if cluster_centers.len() != letters.len() {
        return Err(Error::Config(format!(
            "{} cluster centers for {} letters",
            cluster_centers.len(),
            letters.len()
        )));
    }
    if demos_per_letter == 0 {
        return Err(Error::Config("demos_per_letter must be at least 1".into()));
    }
    if cluster_std < T::zero() || !cluster_std.is_finite() {
        return Err(Error::Config("cluster_std must be finite and non-negative".into()));
    }
    let c_dim = cluster_centers[0].len();
    if c_dim == 0 || cluster_centers.iter().any(|c| c.len() != c_dim) {
        return Err(Error::Config("cluster centers must share a non-zero dimension".into()));
    }
    for i in 0..cluster_centers.len() {
        for j in i + 1..cluster_centers.len() {
            if cluster_centers[i] == cluster_centers[j] {
                return Err(Error::Config(format!("cluster centers {i} and {j} coincide")));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demos = Vec::with_capacity(letters.len() * demos_per_letter);
    for (i, letter) in letters.iter().enumerate() {
        if letter.variants.is_empty() {
            return Err(Error::Config(format!("letter `{}` has no trajectory", letter.name)));
        }
        for j in 0..demos_per_letter {
            let base = &letter.variants[j % letter.variants.len()];
            let ctx = cluster_centers[i].map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c + cluster_std * T::of(z)
            });
            demos.push(Demonstration {
                id: format!("{}-{j}", letter.name),
                dt: base.dt,
                positions: base.positions.clone(),
                contexts: Some(vec![ctx; base.len()]),
            });
        }
    }
    TrainingSet::from_demonstrations(demos)
}
