//! Kernelized movement primitive: RBF kernel, mean and covariance
//! prediction, epistemic/aleatoric split and the epistemic gradient.
//!
//! Reference `n` occupies rows `n*O .. n*O+O` of every stacked quantity.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::ReferenceSet;
use crate::scalar::{all_finite, Scalar};

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KmpHyperparams<T: Scalar> {
    pub lambda: T,
    pub lengths: DVector<T>,
    pub jitter: T,
}

impl<T: Scalar> KmpHyperparams<T> {
    pub fn new(lambda: T, lengths: DVector<T>) -> Self {
        KmpHyperparams { lambda, lengths, jitter: T::of(DEFAULT_JITTER) }
    }

    /// Lengths given per group: `l_c` for the `context` leading dimensions, `l_p` for the rest.
    pub fn grouped(lambda: T, context: usize, position: usize, l_c: T, l_p: T) -> Self {
        let lengths = DVector::from_fn(context + position, |i, _| if i < context { l_c } else { l_p });
        Self::new(lambda, lengths)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > T::zero()) || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.lengths.iter().any(|l| !(*l > T::zero()) || !l.is_finite()) {
            return Err(Error::Config("kernel lengths must be positive".into()));
        }
        if self.jitter < T::zero() || !self.jitter.is_finite() {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// `exp(-½ (a-b)ᵀ diag(lengths)⁻² (a-b))`
pub fn rbf_kernel<T: Scalar>(a: &DVector<T>, b: &DVector<T>, lengths: &DVector<T>) -> T {
    let mut q = T::zero();
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / lengths[i];
        q += d * d;
    }
    (-T::of(0.5) * q).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T: Scalar> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
    pub epistemic: T,
    pub aleatoric: DMatrix<T>,
}

/// The quantities a rollout needs at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Query<T: Scalar> {
    pub mean: DVector<T>,
    pub epistemic: T,
    pub gradient: DVector<T>,
}

#[derive(Debug, Clone)]
pub struct KmpModel<T: Scalar> {
    refs: ReferenceSet<T>,
    hyper: KmpHyperparams<T>,
    /// `K + λΣ`, size `NO × NO`.
    factor_reg: Cholesky<T, Dyn>,
    /// `K + jitter·I` on the scalar kernel, size `N × N`.
    factor_plain: Cholesky<T, Dyn>,
    plain_jitter: T,
    reg_jitter: T,
    stacked_mu: DVector<T>,
    /// `(K + λΣ)⁻¹ μ`
    alpha: DVector<T>,
    inv_len_sq: DVector<T>,
}

fn factor_with_jitter<T: Scalar>(m: &DMatrix<T>, start: T, name: &str) -> Result<(Cholesky<T, Dyn>, T)> {
    let mut jitter = start;
    loop {
        let mut a = m.clone();
        if jitter > T::zero() {
            for i in 0..a.nrows() {
                a[(i, i)] += jitter;
            }
        }
        if let Some(c) = Cholesky::new(a) {
            if c.l_dirty().diagonal().iter().all(|d| *d > T::zero() && d.is_finite()) {
                if jitter > start {
                    log::warn!("{name} needed jitter {:e}", jitter.to_f64_lossy());
                }
                return Ok((c, jitter));
            }
        }
        let next = if jitter > T::zero() { jitter * T::of(10.0) } else { T::of(DEFAULT_JITTER) };
        if next > T::of(MAX_JITTER) * T::of(1.0 + 1e-9) {
            return Err(Error::Conditioning { matrix: name.to_string(), jitter: jitter.to_f64_lossy() });
        }
        jitter = next;
    }
}

impl<T: Scalar> KmpModel<T> {
    pub fn fit(refs: ReferenceSet<T>, hyper: KmpHyperparams<T>) -> Result<Self> {
        hyper.validate()?;
        refs.validate()?;
        if hyper.lengths.len() != refs.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} kernel lengths for input dim {}",
                hyper.lengths.len(),
                refs.input_dim
            )));
        }
        let n = refs.len();
        let o = refs.output_dim;
        let kern = Self::scalar_kernel(&refs.inputs, &hyper.lengths);

        let mut reg = DMatrix::zeros(n * o, n * o);
        for i in 0..n {
            for j in 0..n {
                let k = kern[(i, j)];
                for a in 0..o {
                    reg[(i * o + a, j * o + a)] = k;
                }
            }
            let s = &refs.covariances[i];
            for a in 0..o {
                for b in 0..o {
                    reg[(i * o + a, i * o + b)] += hyper.lambda * T::of(0.5) * (s[(a, b)] + s[(b, a)]);
                }
            }
        }
        let (factor_reg, reg_jitter) = factor_with_jitter(&reg, T::zero(), "K + lambda*Sigma")?;
        let (factor_plain, plain_jitter) = factor_with_jitter(&kern, hyper.jitter, "K + jitter*I")?;

        let mut stacked_mu = DVector::zeros(n * o);
        for (i, m) in refs.means.iter().enumerate() {
            stacked_mu.rows_mut(i * o, o).copy_from(m);
        }
        let alpha = factor_reg.solve(&stacked_mu);
        let inv_len_sq = hyper.lengths.map(|l| T::one() / (l * l));
        Ok(KmpModel { refs, hyper, factor_reg, factor_plain, plain_jitter, reg_jitter, stacked_mu, alpha, inv_len_sq })
    }

    fn scalar_kernel(inputs: &[DVector<T>], lengths: &DVector<T>) -> DMatrix<T> {
        let n = inputs.len();
        let rows: Vec<Vec<T>> =
            (0..n).into_par_iter().map(|i| (0..n).map(|j| rbf_kernel(&inputs[i], &inputs[j], lengths)).collect()).collect();
        DMatrix::from_fn(n, n, |i, j| rows[i][j])
    }

    pub fn references(&self) -> &ReferenceSet<T> {
        &self.refs
    }

    pub fn hyperparams(&self) -> &KmpHyperparams<T> {
        &self.hyper
    }

    /// Jitter actually added to `K` for the epistemic factorization.
    pub fn jitter(&self) -> T {
        self.plain_jitter
    }

    /// Extra diagonal added to `K + λΣ` (zero unless it failed to factorize).
    pub fn reg_jitter(&self) -> T {
        self.reg_jitter
    }

    pub fn input_dim(&self) -> usize {
        self.refs.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.refs.output_dim
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn stacked_mean(&self) -> &DVector<T> {
        &self.stacked_mu
    }

    /// Scalar kernel matrix `[k(s_i, s_j)]` over the reference inputs.
    pub fn kernel_matrix(&self) -> DMatrix<T> {
        Self::scalar_kernel(&self.refs.inputs, &self.hyper.lengths)
    }

    /// Kernel values `k(s*, s_n)` for every reference.
    pub fn kernel_vector(&self, s: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(self.len(), self.refs.inputs.iter().map(|r| rbf_kernel(s, r, &self.hyper.lengths)))
    }

    fn check_query(&self, s: &DVector<T>) -> Result<()> {
        if s.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!("query has dim {}, model input dim is {}", s.len(), self.input_dim())));
        }
        if !all_finite(s) {
            return Err(Error::Input("query input is not finite".into()));
        }
        Ok(())
    }

    fn mean_from_kernel(&self, k: &DVector<T>) -> DVector<T> {
        let o = self.output_dim();
        let mut mean = DVector::zeros(o);
        for (n, &kn) in k.iter().enumerate() {
            for a in 0..o {
                mean[a] += kn * self.alpha[n * o + a];
            }
        }
        mean
    }

    pub fn predict(&self, s: &DVector<T>) -> Result<Prediction<T>> {
        self.check_query(s)?;
        let k = self.kernel_vector(s);
        let n = self.len();
        let o = self.output_dim();
        let mean = self.mean_from_kernel(&k);

        // k* (K + λΣ)⁻¹ k*ᵀ, one stacked solve per output dimension.
        let mut rhs = DMatrix::zeros(n * o, o);
        for (i, &ki) in k.iter().enumerate() {
            for a in 0..o {
                rhs[(i * o + a, a)] = ki;
            }
        }
        let sol = self.factor_reg.solve(&rhs);
        let quad = rhs.transpose() * sol;
        let scale = T::of(n as f64) / self.hyper.lambda;
        let mut covariance = (DMatrix::identity(o, o) - quad) * scale;
        covariance = (&covariance + covariance.transpose()) * T::of(0.5);

        let epistemic = T::one() - k.dot(&self.factor_plain.solve(&k));
        let aleatoric = &covariance / scale - DMatrix::identity(o, o) * epistemic;
        Ok(Prediction { mean, covariance, epistemic, aleatoric })
    }

    /// Mean, epistemic variance and its gradient, skipping the covariance solve.
    pub fn query(&self, s: &DVector<T>) -> Result<Query<T>> {
        self.check_query(s)?;
        let k = self.kernel_vector(s);
        let mean = self.mean_from_kernel(&k);
        let a = self.factor_plain.solve(&k);
        let epistemic = T::one() - k.dot(&a);
        let gradient = self.gradient_from(s, &k, &a);
        Ok(Query { mean, epistemic, gradient })
    }

    pub fn epistemic(&self, s: &DVector<T>) -> Result<T> {
        self.check_query(s)?;
        let k = self.kernel_vector(s);
        Ok(T::one() - k.dot(&self.factor_plain.solve(&k)))
    }

    /// `∇Σ_ep = 2 Σ_n a_n k_n L (s − s_n)` with `a = (K + jitter·I)⁻¹ k*`.
    pub fn epistemic_gradient(&self, s: &DVector<T>) -> Result<DVector<T>> {
        self.check_query(s)?;
        let k = self.kernel_vector(s);
        let a = self.factor_plain.solve(&k);
        Ok(self.gradient_from(s, &k, &a))
    }

    fn gradient_from(&self, s: &DVector<T>, k: &DVector<T>, a: &DVector<T>) -> DVector<T> {
        let mut g = DVector::zeros(s.len());
        for (n, r) in self.refs.inputs.iter().enumerate() {
            let w = a[n] * k[n];
            if w == T::zero() {
                continue;
            }
            for i in 0..s.len() {
                g[i] += w * (s[i] - r[i]) * self.inv_len_sq[i];
            }
        }
        g * T::of(2.0)
    }
}

/// Free-function forms mirroring the method API.
pub fn kmp_fit<T: Scalar>(refs: ReferenceSet<T>, hyper: KmpHyperparams<T>) -> Result<KmpModel<T>> {
    KmpModel::fit(refs, hyper)
}

pub fn kmp_predict<T: Scalar>(model: &KmpModel<T>, s: &DVector<T>) -> Result<Prediction<T>> {
    model.predict(s)
}

pub fn epistemic_gradient<T: Scalar>(model: &KmpModel<T>, s: &DVector<T>) -> Result<DVector<T>> {
    model.epistemic_gradient(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn refs_1d(points: &[(f64, f64, f64)]) -> ReferenceSet<f64> {
        ReferenceSet {
            inputs: points.iter().map(|p| dvector![p.0]).collect(),
            means: points.iter().map(|p| dvector![p.1]).collect(),
            covariances: points.iter().map(|p| dmatrix![p.2]).collect(),
            input_dim: 1,
            output_dim: 1,
        }
    }

    fn random_refs(n: usize, i: usize, o: usize, seed: u64) -> ReferenceSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut covariances = Vec::new();
        for _ in 0..n {
            let a = DMatrix::from_fn(o, o, |_, _| rng.random_range(-0.5..0.5));
            covariances.push(&a * a.transpose() + DMatrix::identity(o, o) * 0.1);
        }
        ReferenceSet {
            inputs: (0..n).map(|_| DVector::from_fn(i, |_, _| rng.random_range(-1.0..1.0))).collect(),
            means: (0..n).map(|_| DVector::from_fn(o, |_, _| rng.random_range(-2.0..2.0))).collect(),
            covariances,
            input_dim: i,
            output_dim: o,
        }
    }

    #[test]
    fn kernel_basics() {
        let l = dvector![0.3, 2.0];
        assert_eq!(rbf_kernel(&dvector![1.0, 2.0], &dvector![1.0, 2.0], &l), 1.0);
        let k = rbf_kernel(&dvector![0.3, 0.0], &dvector![0.0, 0.0], &l);
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let b = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            assert_eq!(rbf_kernel(&a, &b, &l), rbf_kernel(&b, &a, &l));
        }
    }

    #[test]
    fn one_by_one_closed_forms() {
        let (mu, var, lambda) = (0.8, 0.3, 0.5);
        let model = KmpModel::fit(refs_1d(&[(0.2, mu, var)]), KmpHyperparams::new(lambda, dvector![0.4])).unwrap();
        let p = model.predict(&dvector![0.2]).unwrap();
        assert!((p.mean[0] - mu / (1.0 + lambda * var)).abs() < 1e-14);
        let j = model.jitter();
        assert!((p.epistemic - (1.0 - 1.0 / (1.0 + j))).abs() < 1e-14);
        // (N/λ)(1 − 1/(1+λσ²))
        let cov = (1.0 / lambda) * (1.0 - 1.0 / (1.0 + lambda * var));
        assert!((p.covariance[(0, 0)] - cov).abs() < 1e-12);
    }

    #[test]
    fn one_by_one_gradient() {
        let l = 0.4;
        let model = KmpModel::fit(refs_1d(&[(0.0, 1.0, 0.1)]), KmpHyperparams::new(0.5, dvector![l])).unwrap();
        let j = model.jitter();
        for d in [-0.5, -0.1, 0.05, 0.3, 1.0] {
            let g = model.epistemic_gradient(&dvector![d]).unwrap()[0];
            let expected = 2.0 * d / (l * l) * (-(d * d) / (l * l)).exp() / (1.0 + j);
            assert!((g - expected).abs() < 1e-12, "{g} vs {expected}");
        }
    }

    #[test]
    fn duplicated_inputs_escalate_jitter() {
        let refs = refs_1d(&[(0.0, 1.0, 0.1), (0.0, 1.0, 0.1)]);
        let mut hyper = KmpHyperparams::new(0.5, dvector![0.3]);
        hyper.jitter = 0.0;
        let model = KmpModel::fit(refs, hyper).unwrap();
        assert!(model.jitter() > 0.0);
    }

    #[test]
    fn interpolation_and_far_field() {
        let refs = random_refs(15, 2, 2, 3);
        let model = KmpModel::fit(refs.clone(), KmpHyperparams::new(0.5, dvector![0.2, 0.2])).unwrap();
        let p = model.predict(&refs.inputs[4]).unwrap();
        assert!(p.epistemic <= 1e-6);
        let far = model.predict(&dvector![100.0, -100.0]).unwrap();
        assert!(far.mean.amax() <= 1e-9);
        assert!((far.epistemic - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decomposition_matches_direct_triple_product() {
        let refs = random_refs(12, 2, 2, 7);
        let lambda = 0.7;
        let model = KmpModel::fit(refs.clone(), KmpHyperparams::new(lambda, dvector![0.5, 0.4])).unwrap();
        let n = refs.len();
        let o = 2;
        let kern = model.kernel_matrix();
        let mut big_k = DMatrix::zeros(n * o, n * o);
        let mut sig = DMatrix::zeros(n * o, n * o);
        for i in 0..n {
            for j in 0..n {
                for a in 0..o {
                    big_k[(i * o + a, j * o + a)] = kern[(i, j)];
                }
            }
            sig.view_mut((i * o, i * o), (o, o)).copy_from(&(&refs.covariances[i] * lambda));
        }
        let inner = &big_k + &big_k * sig.try_inverse().unwrap() * &big_k;
        let inner_inv = inner.try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = DVector::from_fn(2, |_, _| rng.random_range(-1.2..1.2));
            let p = model.predict(&s).unwrap();
            let k = model.kernel_vector(&s);
            let mut ks = DMatrix::zeros(o, n * o);
            for i in 0..n {
                for a in 0..o {
                    ks[(a, i * o + a)] = k[i];
                }
            }
            let direct = &ks * &inner_inv * ks.transpose();
            assert!((&direct - &p.aleatoric).norm() < 1e-6, "{}", (&direct - &p.aleatoric).norm());
        }
    }

    #[test]
    fn gradient_vanishes_at_references() {
        let refs = random_refs(6, 2, 1, 11);
        let model = KmpModel::fit(refs.clone(), KmpHyperparams::new(0.5, dvector![0.1, 0.1])).unwrap();
        for r in &refs.inputs {
            assert!(model.epistemic_gradient(r).unwrap().amax() <= 1e-6);
        }
    }

    #[test]
    fn query_agrees_with_predict() {
        let refs = random_refs(10, 3, 2, 5);
        let model = KmpModel::fit(refs, KmpHyperparams::new(0.5, dvector![0.4, 0.4, 0.6])).unwrap();
        let s = dvector![0.1, -0.2, 0.3];
        let p = model.predict(&s).unwrap();
        let q = model.query(&s).unwrap();
        assert_eq!(p.mean, q.mean);
        assert_eq!(p.epistemic, q.epistemic);
        assert_eq!(q.gradient, model.epistemic_gradient(&s).unwrap());
    }

    #[test]
    fn rejects_bad_queries_and_hyperparams() {
        let model = KmpModel::fit(refs_1d(&[(0.0, 1.0, 0.1)]), KmpHyperparams::new(0.5, dvector![0.3])).unwrap();
        assert!(matches!(model.predict(&dvector![f64::NAN]), Err(Error::Input(_))));
        assert!(matches!(model.predict(&dvector![0.0, 1.0]), Err(Error::DimensionMismatch(_))));
        let bad = KmpHyperparams::new(0.0, dvector![0.3]);
        assert!(KmpModel::fit(refs_1d(&[(0.0, 1.0, 0.1)]), bad).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let refs = ReferenceSet::<f32> {
            inputs: vec![dvector![0.0f32], dvector![0.5]],
            means: vec![dvector![1.0f32], dvector![-1.0]],
            covariances: vec![dmatrix![0.1f32], dmatrix![0.1]],
            input_dim: 1,
            output_dim: 1,
        };
        let model = KmpModel::fit(refs, KmpHyperparams::new(0.5f32, dvector![0.3f32])).unwrap();
        let p = model.predict(&dvector![0.25f32]).unwrap();
        assert!(p.mean[0].abs() < 1e-4);
        assert!(p.epistemic > 0.0 && p.epistemic < 1.0);
    }
}
