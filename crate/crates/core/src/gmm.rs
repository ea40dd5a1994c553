//! Gaussian mixture over the joint `(input, output)` space, fitted by EM,
//! and Gaussian mixture regression used to seed the KMP reference set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::demonstrations::TrainingSample;
use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

/// Relative log-likelihood tolerance for EM convergence.
pub const EM_TOLERANCE: f64 = 1e-6;
pub const EM_MAX_ITERATIONS: usize = 200;
const KMEANS_ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub seed: u64,
    pub iterations: usize,
    /// Log-likelihood after initialization and after every EM iteration.
    pub log_likelihood: Vec<f64>,
    pub reseeded: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel<T: Scalar> {
    pub weights: DVector<T>,
    pub means: Vec<DVector<T>>,
    pub covariances: Vec<DMatrix<T>>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub fit: FitSummary,
}

impl<T: Scalar> GmmModel<T> {
    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Log-density of the marginal mixture over the input block.
    pub fn marginal_log_density(&self, s: &DVector<T>) -> T {
        Gmr::new(self).map(|g| g.marginal_log_density(s)).unwrap_or_else(|_| T::of(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone)]
pub struct EmOptions<T: Scalar> {
    pub components: usize,
    pub seed: u64,
    /// Added to the covariance diagonal after every M-step, one value per joint dimension.
    pub reg: DVector<T>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

/// `1e-6` times the per-dimension variance of the joint samples.
pub fn default_regularization<T: Scalar>(samples: &[TrainingSample<T>]) -> DVector<T> {
    let data = joint(samples);
    let var = variance(&data);
    var.map(|v| (v * T::of(1e-6)).max(T::of(1e-12)))
}

/// EM with a uniform diagonal regularizer `reg`.
pub fn em_fit<T: Scalar>(samples: &[TrainingSample<T>], components: usize, seed: u64, reg: T) -> Result<GmmModel<T>> {
    let d = samples.first().map_or(0, |s| s.input.len() + s.output.len());
    em_fit_with(
        samples,
        &EmOptions {
            components,
            seed,
            reg: DVector::from_element(d, reg),
            tolerance: EM_TOLERANCE,
            max_iterations: EM_MAX_ITERATIONS,
        },
    )
}

pub fn em_fit_with<T: Scalar>(samples: &[TrainingSample<T>], opts: &EmOptions<T>) -> Result<GmmModel<T>> {
    if samples.is_empty() {
        return Err(Error::Data("cannot fit a mixture to an empty sample set".into()));
    }
    let k = opts.components;
    if k == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    if samples.len() < k {
        return Err(Error::Data(format!("{} samples for {k} components", samples.len())));
    }
    let input_dim = samples[0].input.len();
    let output_dim = samples[0].output.len();
    if samples.iter().any(|s| s.input.len() != input_dim || s.output.len() != output_dim) {
        return Err(Error::DimensionMismatch("samples have inconsistent dimensions".into()));
    }
    let data = joint(samples);
    let d = input_dim + output_dim;
    if opts.reg.len() != d || opts.reg.iter().any(|r| *r < T::zero()) {
        return Err(Error::Config(format!("regularizer must have {d} non-negative entries")));
    }
    if data.iter().any(|x| !all_finite(x)) {
        return Err(Error::Data("samples contain non-finite values".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let data_var = variance(&data);
    let mut state = kmeans_init(&data, k, &opts.reg, &data_var, &mut rng);
    let mut reseeded = 0;

    let (mut resp, mut point_ll) = e_step(&data, &state)?;
    let mut ll = sum_fixed_order(&point_ll);
    let mut history = vec![ll.to_f64_lossy()];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        reseeded += m_step(&data, &resp, &point_ll, &opts.reg, &data_var, &mut state);
        let (r, p) = e_step(&data, &state)?;
        resp = r;
        point_ll = p;
        let new_ll = sum_fixed_order(&point_ll);
        history.push(new_ll.to_f64_lossy());
        let improvement = (new_ll - ll).to_f64_lossy();
        let scale = ll.to_f64_lossy().abs().max(1.0);
        ll = new_ll;
        if improvement.abs() < opts.tolerance * scale {
            converged = true;
            break;
        }
    }

    Ok(GmmModel {
        weights: state.weights,
        means: state.means,
        covariances: state.covariances,
        input_dim,
        output_dim,
        fit: FitSummary { seed: opts.seed, iterations, log_likelihood: history, reseeded, converged },
    })
}

struct MixtureState<T: Scalar> {
    weights: DVector<T>,
    means: Vec<DVector<T>>,
    covariances: Vec<DMatrix<T>>,
}

fn joint<T: Scalar>(samples: &[TrainingSample<T>]) -> Vec<DVector<T>> {
    samples.iter().map(|s| crate::demonstrations::stack(&s.input, &s.output)).collect()
}

fn mean_of<T: Scalar>(data: &[DVector<T>]) -> DVector<T> {
    let mut m = DVector::zeros(data[0].len());
    for x in data {
        m += x;
    }
    m / T::of(data.len() as f64)
}

fn variance<T: Scalar>(data: &[DVector<T>]) -> DVector<T> {
    let m = mean_of(data);
    let mut v = DVector::zeros(m.len());
    for x in data {
        let d = x - &m;
        v += d.component_mul(&d);
    }
    v / T::of(data.len() as f64)
}

fn sum_fixed_order<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b)
}

fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::of(f64::NEG_INFINITY), |a, b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).fold(T::zero(), |a, b| a + b).ln()
}

/// Cholesky-backed Gaussian log-density.
#[derive(Debug, Clone)]
pub(crate) struct GaussianDensity<T: Scalar> {
    mean: DVector<T>,
    chol: Cholesky<T, Dyn>,
    log_norm: T,
}

impl<T: Scalar> GaussianDensity<T> {
    pub(crate) fn new(mean: DVector<T>, cov: DMatrix<T>) -> Option<Self> {
        let chol = Cholesky::new(cov)?;
        let l = chol.l_dirty();
        let mut logdet = T::zero();
        for i in 0..l.nrows() {
            let d = l[(i, i)];
            if !(d > T::zero()) || !d.is_finite() {
                return None;
            }
            logdet += d.ln();
        }
        logdet *= T::of(2.0);
        let log_norm = -T::of(0.5) * (T::of(mean.len() as f64 * (2.0 * std::f64::consts::PI).ln()) + logdet);
        Some(GaussianDensity { mean, chol, log_norm })
    }

    pub(crate) fn log_pdf(&self, x: &DVector<T>) -> T {
        let diff = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - T::of(0.5) * z.norm_squared()
    }

    pub(crate) fn lower(&self) -> DMatrix<T> {
        self.chol.l()
    }
}

fn kmeans_init<T: Scalar>(
    data: &[DVector<T>],
    k: usize,
    reg: &DVector<T>,
    data_var: &DVector<T>,
    rng: &mut ChaCha8Rng,
) -> MixtureState<T> {
    let n = data.len();
    let mut centers: Vec<DVector<T>> = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| (x - &centers[0]).norm_squared().to_f64_lossy()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 && total.is_finite() {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data[idx].clone();
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min((x - &c).norm_squared().to_f64_lossy());
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERATIONS {
        let new_assign: Vec<usize> = data
            .par_iter()
            .map(|x| {
                let mut best = 0;
                let mut best_d = T::of(f64::INFINITY);
                for (j, c) in centers.iter().enumerate() {
                    let d = (x - c).norm_squared();
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best
            })
            .collect();
        let changed = new_assign != assign;
        assign = new_assign;
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<T>> = data.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(x, _)| x).collect();
            if !members.is_empty() {
                let mut m = DVector::zeros(c.len());
                for x in &members {
                    m += *x;
                }
                *c = m / T::of(members.len() as f64);
            }
        }
        if !changed {
            break;
        }
    }

    let dim = data[0].len();
    let mut weights = DVector::zeros(k);
    let mut covariances = Vec::with_capacity(k);
    for (j, c) in centers.iter().enumerate() {
        let members: Vec<&DVector<T>> = data.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(x, _)| x).collect();
        weights[j] = T::of(members.len().max(1) as f64);
        let mut cov = if members.len() > dim {
            let mut s = DMatrix::zeros(dim, dim);
            for x in &members {
                let d = *x - c;
                s += &d * d.transpose();
            }
            s / T::of(members.len() as f64)
        } else {
            DMatrix::from_diagonal(&(data_var * T::of(0.01)))
        };
        for i in 0..dim {
            cov[(i, i)] += reg[i];
        }
        covariances.push(cov);
    }
    let total = weights.sum();
    weights /= total;
    MixtureState { weights, means: centers, covariances }
}

type Responsibilities<T> = Vec<Vec<T>>;

fn e_step<T: Scalar>(data: &[DVector<T>], state: &MixtureState<T>) -> Result<(Responsibilities<T>, Vec<T>)> {
    let dens: Vec<GaussianDensity<T>> = state
        .means
        .iter()
        .zip(&state.covariances)
        .map(|(m, c)| GaussianDensity::new(m.clone(), c.clone()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Conditioning { matrix: "mixture component covariance".into(), jitter: 0.0 })?;
    let log_w: Vec<T> = state.weights.iter().map(|w| w.ln()).collect();
    let rows: Vec<(Vec<T>, T)> = data
        .par_iter()
        .map(|x| {
            let lp: Vec<T> = dens.iter().zip(&log_w).map(|(g, &lw)| lw + g.log_pdf(x)).collect();
            let lse = log_sum_exp(&lp);
            let r = if lse.is_finite() {
                lp.iter().map(|&l| (l - lse).exp()).collect()
            } else {
                vec![T::one() / T::of(lp.len() as f64); lp.len()]
            };
            (r, lse)
        })
        .collect();
    Ok(rows.into_iter().unzip())
}

/// Returns the number of components that had to be re-seeded.
fn m_step<T: Scalar>(
    data: &[DVector<T>],
    resp: &Responsibilities<T>,
    point_ll: &[T],
    reg: &DVector<T>,
    data_var: &DVector<T>,
    state: &mut MixtureState<T>,
) -> usize {
    let n = data.len();
    let k = state.means.len();
    let dim = data[0].len();
    let floor = T::of(1e-8 * n as f64).min(T::of(1e-3));
    let mut reseeded = 0;
    let mut taken: Vec<usize> = Vec::new();
    for j in 0..k {
        let nk = resp.iter().fold(T::zero(), |a, r| a + r[j]);
        let mut ok = nk > floor && nk.is_finite();
        if ok {
            let mut mean = DVector::zeros(dim);
            for (x, r) in data.iter().zip(resp) {
                mean += x * r[j];
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(dim, dim);
            for (x, r) in data.iter().zip(resp) {
                let d = x - &mean;
                cov.ger(r[j], &d, &d, T::one());
            }
            cov /= nk;
            for i in 0..dim {
                cov[(i, i)] += reg[i];
            }
            cov = (&cov + cov.transpose()) * T::of(0.5);
            if Cholesky::new(cov.clone()).is_some() {
                state.weights[j] = nk / T::of(n as f64);
                state.means[j] = mean;
                state.covariances[j] = cov;
            } else {
                ok = false;
            }
        }
        if !ok {
            // Re-seed on the worst explained sample not already used for a re-seed.
            let idx = (0..n)
                .filter(|i| !taken.contains(i))
                .min_by(|&a, &b| point_ll[a].partial_cmp(&point_ll[b]).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0);
            taken.push(idx);
            log::warn!("mixture component {j} collapsed; re-seeding it on sample {idx}");
            state.means[j] = data[idx].clone();
            let mut cov = DMatrix::from_diagonal(&(data_var * T::of(0.01)));
            for i in 0..dim {
                cov[(i, i)] += reg[i];
            }
            state.covariances[j] = cov;
            state.weights[j] = T::one() / T::of(k as f64);
            reseeded += 1;
        }
    }
    let total = state.weights.sum();
    state.weights /= total;
    reseeded
}

// ---------------------------------------------------------------------------
// Regression

#[derive(Debug, Clone)]
struct GmrComponent<T: Scalar> {
    log_weight: T,
    input: GaussianDensity<T>,
    mean_out: DVector<T>,
    mean_in: DVector<T>,
    /// `Σ_oi Σ_ii⁻¹`
    gain: DMatrix<T>,
    /// `Σ_oo − Σ_oi Σ_ii⁻¹ Σ_io`
    cond_cov: DMatrix<T>,
}

/// Precomputed conditioning of a [`GmmModel`] on its input block.
#[derive(Debug, Clone)]
pub struct Gmr<T: Scalar> {
    comps: Vec<GmrComponent<T>>,
    input_dim: usize,
    output_dim: usize,
}

impl<T: Scalar> Gmr<T> {
    pub fn new(model: &GmmModel<T>) -> Result<Self> {
        let (i, o) = (model.input_dim, model.output_dim);
        let comps = model
            .means
            .iter()
            .zip(&model.covariances)
            .zip(model.weights.iter())
            .map(|((mean, cov), &w)| {
                let sii = cov.view((0, 0), (i, i)).into_owned();
                let soi = cov.view((i, 0), (o, i)).into_owned();
                let soo = cov.view((i, i), (o, o)).into_owned();
                let mean_in = mean.rows(0, i).into_owned();
                let input = GaussianDensity::new(mean_in.clone(), sii.clone()).ok_or_else(|| Error::Conditioning {
                    matrix: "mixture input-block covariance".into(),
                    jitter: 0.0,
                })?;
                let chol = Cholesky::new(sii).expect("factorized above");
                // gain = soi * sii^-1  <=>  gainᵀ = sii^-1 * sio
                let gain = chol.solve(&soi.transpose()).transpose();
                let mut cond_cov = &soo - &gain * soi.transpose();
                cond_cov = (&cond_cov + cond_cov.transpose()) * T::of(0.5);
                Ok(GmrComponent {
                    log_weight: w.ln(),
                    input,
                    mean_out: mean.rows(i, o).into_owned(),
                    mean_in,
                    gain,
                    cond_cov,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gmr { comps, input_dim: i, output_dim: o })
    }

    fn log_responsibilities(&self, s: &DVector<T>) -> Vec<T> {
        self.comps.iter().map(|c| c.log_weight + c.input.log_pdf(s)).collect()
    }

    pub fn marginal_log_density(&self, s: &DVector<T>) -> T {
        log_sum_exp(&self.log_responsibilities(s))
    }

    /// Responsibilities `h_k(s)`; uniform when every component density underflows.
    pub fn responsibilities(&self, s: &DVector<T>) -> Vec<T> {
        let lp = self.log_responsibilities(s);
        let lse = log_sum_exp(&lp);
        if lse.is_finite() {
            lp.iter().map(|&l| (l - lse).exp()).collect()
        } else {
            vec![T::one() / T::of(lp.len() as f64); lp.len()]
        }
    }

    pub fn condition(&self, s: &DVector<T>) -> Result<(DVector<T>, DMatrix<T>)> {
        if s.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "query has dim {}, mixture input dim is {}",
                s.len(),
                self.input_dim
            )));
        }
        if !all_finite(s) {
            return Err(Error::Input("conditioning input is not finite".into()));
        }
        let h = self.responsibilities(s);
        let o = self.output_dim;
        let mut mean = DVector::zeros(o);
        let mut second = DMatrix::zeros(o, o);
        for (c, &hk) in self.comps.iter().zip(&h) {
            let mk = &c.mean_out + &c.gain * (s - &c.mean_in);
            mean += &mk * hk;
            second += (&c.cond_cov + &mk * mk.transpose()) * hk;
        }
        let mut cov = second - &mean * mean.transpose();
        cov = (&cov + cov.transpose()) * T::of(0.5);
        Ok((mean, cov))
    }
}

/// Conditional output distribution of `model` at input `s`.
pub fn gmr_condition<T: Scalar>(model: &GmmModel<T>, s: &DVector<T>) -> Result<(DVector<T>, DMatrix<T>)> {
    Gmr::new(model)?.condition(s)
}

/// The `N` conditioned reference distributions that parameterize a KMP.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet<T: Scalar> {
    pub inputs: Vec<DVector<T>>,
    pub means: Vec<DVector<T>>,
    pub covariances: Vec<DMatrix<T>>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl<T: Scalar> ReferenceSet<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        if n == 0 {
            return Err(Error::Data("reference set is empty".into()));
        }
        if self.means.len() != n || self.covariances.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "reference set has {n} inputs, {} means, {} covariances",
                self.means.len(),
                self.covariances.len()
            )));
        }
        let (i, o) = (self.input_dim, self.output_dim);
        for r in 0..n {
            if self.inputs[r].len() != i || self.means[r].len() != o || self.covariances[r].shape() != (o, o) {
                return Err(Error::DimensionMismatch(format!("reference {r} does not match dims (I={i}, O={o})")));
            }
            if !all_finite(&self.inputs[r]) || !all_finite(&self.means[r]) || self.covariances[r].iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("reference {r} has non-finite values")));
            }
        }
        Ok(())
    }
}

/// Draws `n_refs` inputs from the marginal mixture over inputs and conditions each.
pub fn build_reference_set<T: Scalar>(model: &GmmModel<T>, n_refs: usize, seed: u64) -> Result<ReferenceSet<T>> {
    if n_refs == 0 {
        return Err(Error::Config("reference set needs at least one point".into()));
    }
    let gmr = Gmr::new(model)?;
    let weights: Vec<f64> = model.weights.iter().map(|w| w.to_f64_lossy()).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Data(format!("mixture weights: {e}")))?;
    let lowers: Vec<DMatrix<T>> = gmr.comps.iter().map(|c| c.input.lower()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n_refs);
    for _ in 0..n_refs {
        let k = pick.sample(&mut rng);
        let z = DVector::from_fn(model.input_dim, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::of(v)
        });
        inputs.push(&gmr.comps[k].mean_in + &lowers[k] * z);
    }
    let conditioned: Vec<(DVector<T>, DMatrix<T>)> =
        inputs.par_iter().map(|s| gmr.condition(s)).collect::<Result<_>>()?;
    let (means, covariances) = conditioned.into_iter().unzip();
    Ok(ReferenceSet { inputs, means, covariances, input_dim: model.input_dim, output_dim: model.output_dim })
}
