//! The three expert policies (imitation, stabilizing, goal attractor) and
//! their mixture-of-experts combination.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kmp::{rbf_kernel, KmpModel, Query};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T: Scalar> {
    /// Constant weight of the stabilizing policy.
    pub pi_sp: T,
    pub k_sp: T,
    pub k_g: T,
    pub gamma_sigma: T,
    pub gamma_grad: T,
    /// Time constant dividing both expert gains.
    pub dt: T,
    pub grad_eps: T,
    pub sigma_sp: T,
    pub sigma_g: T,
}

pub const DEFAULT_EXPERT_DT: f64 = 1.0;
pub const DEFAULT_GRAD_EPS: f64 = 1e-200;

impl<T: Scalar> Default for FusionParams<T> {
    fn default() -> Self {
        FusionParams {
            pi_sp: T::of(0.6),
            k_sp: T::of(4.0),
            k_g: T::of(20.0),
            gamma_sigma: T::of(0.5),
            gamma_grad: T::of(1.0),
            dt: T::of(DEFAULT_EXPERT_DT),
            grad_eps: T::of(DEFAULT_GRAD_EPS),
            sigma_sp: T::of(1e-4),
            sigma_g: T::of(1e-4),
        }
    }
}

impl<T: Scalar> FusionParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi_sp >= T::zero() && self.pi_sp < T::one()) {
            return Err(Error::Config("pi_sp must lie in [0, 1)".into()));
        }
        let positive = [
            ("K_s", self.k_sp),
            ("K_g", self.k_g),
            ("gamma_sigma", self.gamma_sigma),
            ("gamma_grad", self.gamma_grad),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.grad_eps >= T::zero()) || !self.grad_eps.is_finite() {
            return Err(Error::Config("grad_eps must be non-negative".into()));
        }
        if self.sigma_sp < T::zero() || self.sigma_g < T::zero() {
            return Err(Error::Config("expert variances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Final inputs and positions of every demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalSet<T: Scalar> {
    pub inputs: Vec<DVector<T>>,
    pub positions: Vec<DVector<T>>,
    pub context_dim: usize,
}

impl<T: Scalar> GoalSet<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingCoefficients<T: Scalar> {
    pub pi_kmp: T,
    pub pi_sp: T,
    pub pi_g: T,
    pub k_max: T,
    pub goal_index: usize,
}

/// Goal activation over the full input (context included); ties go to the lowest index.
pub fn mixing_coefficients<T: Scalar>(
    s: &DVector<T>,
    goals: &GoalSet<T>,
    lengths: &DVector<T>,
    pi_sp: T,
) -> Result<MixingCoefficients<T>> {
    if goals.is_empty() {
        return Err(Error::Config("goal set is empty".into()));
    }
    let mut k_max = T::of(f64::NEG_INFINITY);
    let mut goal_index = 0;
    for (i, g) in goals.inputs.iter().enumerate() {
        if g.len() != s.len() {
            return Err(Error::DimensionMismatch(format!("goal {i} has dim {}, state has {}", g.len(), s.len())));
        }
        let k = rbf_kernel(s, g, lengths);
        if k > k_max {
            k_max = k;
            goal_index = i;
        }
    }
    let rest = T::one() - pi_sp;
    Ok(MixingCoefficients { pi_kmp: rest * (T::one() - k_max), pi_sp, pi_g: rest * k_max, k_max, goal_index })
}

/// Thresholded normalization of the position gradient, then `-K_sp ∇̃ / dt`.
pub fn stabilizing_from_gradient<T: Scalar>(grad_x: &DVector<T>, epistemic: T, params: &FusionParams<T>) -> DVector<T> {
    let norm = scaled_norm(grad_x);
    let direction = if epistemic < params.gamma_sigma && norm < params.gamma_grad {
        grad_x.clone()
    } else if norm < params.grad_eps || norm == T::zero() {
        return DVector::zeros(grad_x.len());
    } else {
        let m = grad_x.amax();
        let unit = grad_x / m;
        let n = unit.norm();
        unit / n
    };
    direction * (-params.k_sp / params.dt)
}

/// Euclidean norm that survives components whose squares underflow.
fn scaled_norm<T: Scalar>(v: &DVector<T>) -> T {
    let m = v.amax();
    if m == T::zero() || !m.is_finite() {
        return m;
    }
    (v / m).norm() * m
}

fn position_block<T: Scalar>(model: &KmpModel<T>, g: &DVector<T>) -> Result<DVector<T>> {
    let o = model.output_dim();
    if o > g.len() {
        return Err(Error::DimensionMismatch(format!("output dim {o} exceeds input dim {}", g.len())));
    }
    Ok(g.rows(g.len() - o, o).into_owned())
}

pub fn stabilizing_velocity<T: Scalar>(model: &KmpModel<T>, s: &DVector<T>, params: &FusionParams<T>) -> Result<DVector<T>> {
    let q = model.query(s)?;
    Ok(stabilizing_from_gradient(&position_block(model, &q.gradient)?, q.epistemic, params))
}

pub fn goal_velocity<T: Scalar>(x: &DVector<T>, goals: &GoalSet<T>, goal_index: usize, params: &FusionParams<T>) -> DVector<T> {
    let xg = &goals.positions[goal_index];
    (xg - x) * (params.k_g / params.dt)
}

/// Mixture moments `Σ πᵢ(Σᵢ + μᵢμᵢᵀ) − μ̂μ̂ᵀ`.
pub fn moe_covariance<T: Scalar>(weights: &[T], means: &[DVector<T>], covariances: &[DMatrix<T>]) -> DMatrix<T> {
    let o = means[0].len();
    let mut mean = DVector::zeros(o);
    let mut second = DMatrix::zeros(o, o);
    for ((&w, m), c) in weights.iter().zip(means).zip(covariances) {
        if w == T::zero() {
            continue;
        }
        mean += m * w;
        second += (c + m * m.transpose()) * w;
    }
    let cov = second - &mean * mean.transpose();
    (&cov + cov.transpose()) * T::of(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Kmp,
    KmpStab,
    KmpGoal,
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Kmp, Strategy::KmpStab, Strategy::KmpGoal, Strategy::Full];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Kmp => "kmp",
            Strategy::KmpStab => "kmp+stab",
            Strategy::KmpGoal => "kmp+goal",
            Strategy::Full => "full",
        }
    }

    /// Effective weights for this ablation, derived from the full-design coefficients.
    pub fn coefficients<T: Scalar>(self, c: MixingCoefficients<T>) -> MixingCoefficients<T> {
        match self {
            Strategy::Kmp => MixingCoefficients { pi_kmp: T::one(), pi_sp: T::zero(), pi_g: T::zero(), ..c },
            Strategy::KmpStab => MixingCoefficients { pi_kmp: T::one() - c.pi_sp, pi_g: T::zero(), ..c },
            Strategy::KmpGoal => {
                MixingCoefficients { pi_kmp: T::one() - c.k_max, pi_sp: T::zero(), pi_g: c.k_max, ..c }
            }
            Strategy::Full => c,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (expected kmp, kmp+stab, kmp+goal or full)")))
    }
}

/// Expert means in the order imitation, stabilizing, goal.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMeans<T: Scalar> {
    pub kmp: DVector<T>,
    pub sp: DVector<T>,
    pub g: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedAction<T: Scalar> {
    pub mean: DVector<T>,
    /// Mixture covariance, only filled by [`fused_action`].
    pub covariance: Option<DMatrix<T>>,
    pub coefficients: MixingCoefficients<T>,
    pub expert_means: ExpertMeans<T>,
    pub epistemic: T,
}

fn combine<T: Scalar>(c: &MixingCoefficients<T>, e: &ExpertMeans<T>) -> DVector<T> {
    &e.kmp * c.pi_kmp + &e.sp * c.pi_sp + &e.g * c.pi_g
}

fn experts<T: Scalar>(
    model: &KmpModel<T>,
    s: &DVector<T>,
    goals: &GoalSet<T>,
    params: &FusionParams<T>,
    q: &Query<T>,
    goal_index: usize,
) -> Result<ExpertMeans<T>> {
    let grad_x = position_block(model, &q.gradient)?;
    let x = s.rows(goals.context_dim, s.len() - goals.context_dim).into_owned();
    Ok(ExpertMeans {
        kmp: q.mean.clone(),
        sp: stabilizing_from_gradient(&grad_x, q.epistemic, params),
        g: goal_velocity(&x, goals, goal_index, params),
    })
}

/// Action of `strategy` at `s` without the covariance solve; used by rollouts.
pub fn strategy_action<T: Scalar>(
    model: &KmpModel<T>,
    s: &DVector<T>,
    goals: &GoalSet<T>,
    params: &FusionParams<T>,
    strategy: Strategy,
) -> Result<FusedAction<T>> {
    let q = model.query(s)?;
    let full = mixing_coefficients(s, goals, &model.hyperparams().lengths, params.pi_sp)?;
    let coefficients = strategy.coefficients(full);
    let expert_means = experts(model, s, goals, params, &q, full.goal_index)?;
    Ok(FusedAction { mean: combine(&coefficients, &expert_means), covariance: None, coefficients, expert_means, epistemic: q.epistemic })
}

/// Full mixture action including the diagnostic mixture covariance.
pub fn fused_action<T: Scalar>(
    model: &KmpModel<T>,
    s: &DVector<T>,
    goals: &GoalSet<T>,
    params: &FusionParams<T>,
) -> Result<FusedAction<T>> {
    params.validate()?;
    let mut action = strategy_action(model, s, goals, params, Strategy::Full)?;
    let pred = model.predict(s)?;
    let o = pred.mean.len();
    let c = &action.coefficients;
    let e = &action.expert_means;
    action.covariance = Some(moe_covariance(
        &[c.pi_kmp, c.pi_sp, c.pi_g],
        &[e.kmp.clone(), e.sp.clone(), e.g.clone()],
        &[
            pred.covariance,
            DMatrix::identity(o, o) * (params.sigma_sp * params.sigma_sp),
            DMatrix::identity(o, o) * (params.sigma_g * params.sigma_g),
        ],
    ));
    Ok(action)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::ReferenceSet;
    use crate::kmp::KmpHyperparams;
    use nalgebra::{dmatrix, dvector};

    fn goals_2d() -> GoalSet<f64> {
        GoalSet { inputs: vec![dvector![0.0, 0.0], dvector![1.0, 1.0]], positions: vec![dvector![0.0, 0.0], dvector![1.0, 1.0]], context_dim: 0 }
    }

    fn literal() -> FusionParams<f64> {
        FusionParams { dt: 0.05, ..FusionParams::default() }
    }

    #[test]
    fn coefficients_at_and_far_from_goal() {
        let l = dvector![0.04, 0.04];
        let c = mixing_coefficients(&dvector![1.0, 1.0], &goals_2d(), &l, 0.6).unwrap();
        assert_eq!(c.k_max, 1.0);
        assert_eq!(c.pi_g, 0.4);
        assert_eq!(c.pi_kmp, 0.0);
        assert_eq!(c.goal_index, 1);
        let far = mixing_coefficients(&dvector![50.0, -50.0], &goals_2d(), &l, 0.6).unwrap();
        assert!(far.pi_g < 1e-12);
        assert!((far.pi_kmp - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_the_lowest_index() {
        let c = mixing_coefficients(&dvector![0.5, 0.5], &goals_2d(), &dvector![1.0, 1.0], 0.2).unwrap();
        assert_eq!(c.goal_index, 0);
    }

    #[test]
    fn empty_goals_are_a_config_error() {
        let g = GoalSet::<f64> { inputs: vec![], positions: vec![], context_dim: 0 };
        assert!(matches!(mixing_coefficients(&dvector![0.0], &g, &dvector![1.0], 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn goal_velocity_is_linear_feedback() {
        let p = literal();
        let g = GoalSet { inputs: vec![dvector![0.01, 0.0]], positions: vec![dvector![0.01, 0.0]], context_dim: 0 };
        let v = goal_velocity(&dvector![0.0, 0.0], &g, 0, &p);
        assert!((&v - dvector![4.0, 0.0]).amax() < 1e-12);
        assert_eq!(goal_velocity(&dvector![0.01, 0.0], &g, 0, &p), dvector![0.0, 0.0]);
        let half = goal_velocity(&dvector![0.005, 0.0], &g, 0, &p);
        assert_eq!(&half * 2.0, v);
    }

    #[test]
    fn stabilizing_branches() {
        let p = literal();
        // normalized branch
        let v = stabilizing_from_gradient(&dvector![1e-3, 2e-3], 0.99, &p);
        assert!((v.norm() - 80.0).abs() < 1e-9);
        // raw branch
        let v = stabilizing_from_gradient(&dvector![0.3, 0.4], 0.4, &p);
        assert!((v.norm() - 40.0).abs() < 1e-9);
        assert!((v - dvector![-24.0, -32.0]).amax() < 1e-12);
        // zero-gradient guard
        let guarded = FusionParams { grad_eps: 1e-12, ..literal() };
        let v = stabilizing_from_gradient(&dvector![1e-14, 0.0], 0.99, &guarded);
        assert_eq!(v, dvector![0.0, 0.0]);
        assert_eq!(stabilizing_from_gradient(&dvector![0.0, 0.0], 0.99, &p), dvector![0.0, 0.0]);
        // squares underflow but the direction is still defined
        let v = stabilizing_from_gradient(&dvector![3e-170, 4e-170], 0.99, &p);
        assert!((v - dvector![-48.0, -64.0]).amax() < 1e-9);
    }

    #[test]
    fn single_expert_covariance_is_that_expert() {
        let means = [dvector![1.0, 2.0], dvector![-3.0, 0.5], dvector![0.0, 7.0]];
        let covs = [dmatrix![2.0, 0.1; 0.1, 1.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 3.0];
        let c = moe_covariance(&[1.0, 0.0, 0.0], &means, &covs);
        assert!((c - &covs[0]).amax() < 1e-12);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("mystery".parse::<Strategy>().is_err());
    }

    fn small_model() -> KmpModel<f64> {
        let refs = ReferenceSet {
            inputs: (0..10).map(|i| dvector![i as f64 * 0.1, 0.0]).collect(),
            means: (0..10).map(|_| dvector![-1.0, 0.0]).collect(),
            covariances: (0..10).map(|_| DMatrix::identity(2, 2) * 0.01).collect(),
            input_dim: 2,
            output_dim: 2,
        };
        KmpModel::fit(refs, KmpHyperparams::new(0.5, dvector![0.1, 0.1])).unwrap()
    }

    #[test]
    fn one_hot_goal_mixture() {
        let model = small_model();
        let goals = GoalSet { inputs: vec![dvector![0.0, 0.0]], positions: vec![dvector![0.0, 0.0]], context_dim: 0 };
        let p = FusionParams { pi_sp: 0.0, ..literal() };
        let a = fused_action(&model, &dvector![0.0, 0.0], &goals, &p).unwrap();
        assert_eq!(a.mean, a.expert_means.g);
        let s = dvector![0.33, 0.21];
        let a = fused_action(&model, &s, &goals, &p).unwrap();
        let c = a.coefficients;
        let e = &a.expert_means;
        assert_eq!(a.mean, &e.kmp * c.pi_kmp + &e.sp * c.pi_sp + &e.g * c.pi_g);
    }

    #[test]
    fn stabilizing_dominates_as_pi_sp_approaches_one() {
        let model = small_model();
        let goals = GoalSet { inputs: vec![dvector![0.0, 0.0]], positions: vec![dvector![0.0, 0.0]], context_dim: 0 };
        let s = dvector![0.5, 0.3];
        let sp = stabilizing_velocity(&model, &s, &literal()).unwrap();
        let p = FusionParams { pi_sp: 1.0 - 1e-12, ..literal() };
        let a = fused_action(&model, &s, &goals, &p).unwrap();
        assert!((a.mean - sp).amax() < 1e-8);
    }
}
