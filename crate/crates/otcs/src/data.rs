//! Point sources for training: empirical datasets and synthetic generators.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ot::EmpiricalMeasure;

/// Anything that can produce i.i.d. batches of points. Object-safe so
/// training loops can hold a `&dyn PointSampler`.
pub trait PointSampler {
    fn dim(&self) -> usize;
    fn sample_batch(&self, rng: &mut dyn RngCore, n: usize) -> Array2<f64>;
}

impl PointSampler for EmpiricalMeasure {
    fn dim(&self) -> usize {
        EmpiricalMeasure::dim(self)
    }

    fn sample_batch(&self, rng: &mut dyn RngCore, n: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.axis_iter_mut(Axis(0)) {
            let i = self.sample_index(&mut *rng);
            row.assign(&self.point(i));
        }
        out
    }
}

/// Isotropic Gaussian generator.
#[derive(Debug, Clone)]
pub struct GaussianGen {
    pub mean: Array1<f64>,
    pub std: f64,
}

impl GaussianGen {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("generator", "mean must have dimension >= 1"));
        }
        if !(std > 0.0) {
            return Err(Error::invalid("generator", "std must be > 0"));
        }
        Ok(GaussianGen { mean: Array1::from(mean), std })
    }
}

impl PointSampler for GaussianGen {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample_batch(&self, rng: &mut dyn RngCore, n: usize) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (slot, m) in row.iter_mut().zip(self.mean.iter()) {
                let z: f64 = StandardNormal.sample(&mut *rng);
                *slot = m + self.std * z;
            }
        }
        out
    }
}

/// Finite mixture of isotropic Gaussians.
#[derive(Debug, Clone)]
pub struct MixtureGen {
    pub components: Vec<GaussianGen>,
    pub weights: Vec<f64>,
}

impl MixtureGen {
    pub fn new(components: Vec<GaussianGen>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(Error::invalid("generator", "component/weight counts must match and be nonzero"));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::invalid("generator", "mixture components must share one dimension"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("generator", "weights must be nonnegative and sum to 1"));
        }
        Ok(MixtureGen { components, weights })
    }
}

impl PointSampler for MixtureGen {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn sample_batch(&self, rng: &mut dyn RngCore, n: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.axis_iter_mut(Axis(0)) {
            let u: f64 = (&mut *rng).gen();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (k, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let sample = self.components[pick].sample_batch(&mut *rng, 1);
            row.assign(&sample.row(0));
        }
        out
    }
}

/// A runtime-polymorphic source, as configured in the data section.
#[derive(Debug, Clone)]
pub enum DataSource {
    Empirical(EmpiricalMeasure),
    Gaussian(GaussianGen),
    Mixture(MixtureGen),
}

impl DataSource {
    /// Materialize an empirical snapshot of `n` draws with uniform weights.
    /// For an empirical source this resamples from it only if `n` differs
    /// from its size; otherwise the dataset is returned as-is.
    pub fn snapshot(&self, rng: &mut dyn RngCore, n: usize) -> Result<EmpiricalMeasure> {
        match self {
            DataSource::Empirical(m) if m.len() == n => Ok(m.clone()),
            other => EmpiricalMeasure::uniform(other.sample_batch(rng, n)),
        }
    }
}

impl PointSampler for DataSource {
    fn dim(&self) -> usize {
        match self {
            DataSource::Empirical(m) => m.dim(),
            DataSource::Gaussian(g) => g.dim(),
            DataSource::Mixture(m) => m.dim(),
        }
    }

    fn sample_batch(&self, rng: &mut dyn RngCore, n: usize) -> Array2<f64> {
        match self {
            DataSource::Empirical(m) => m.sample_batch(rng, n),
            DataSource::Gaussian(g) => g.sample_batch(rng, n),
            DataSource::Mixture(m) => m.sample_batch(rng, n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn gaussian_moments() {
        let gen = GaussianGen::new(vec![2.0], 0.5).unwrap();
        let mut r = rng::stream(1, "test/data", &[]);
        let batch = gen.sample_batch(&mut r, 50_000);
        let mean = batch.column(0).mean().unwrap();
        let var = batch.column(0).mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        assert!((mean - 2.0).abs() < 0.01);
        assert!((var - 0.25).abs() < 0.01);
    }

    #[test]
    fn mixture_weights_respected() {
        let gen = MixtureGen::new(
            vec![
                GaussianGen::new(vec![-10.0], 0.1).unwrap(),
                GaussianGen::new(vec![10.0], 0.1).unwrap(),
            ],
            vec![0.25, 0.75],
        )
        .unwrap();
        let mut r = rng::stream(2, "test/data", &[]);
        let batch = gen.sample_batch(&mut r, 20_000);
        let right = batch.column(0).iter().filter(|v| **v > 0.0).count();
        let frac = right as f64 / 20_000.0;
        assert!((frac - 0.75).abs() < 0.02);
    }

    #[test]
    fn empirical_sampling_follows_weights() {
        let m = EmpiricalMeasure::new(
            ndarray::arr2(&[[0.0], [1.0], [2.0]]),
            ndarray::arr1(&[0.5, 0.25, 0.25]),
        )
        .unwrap();
        let mut r = rng::stream(3, "test/data", &[]);
        let mut counts = [0usize; 3];
        for _ in 0..40_000 {
            counts[m.sample_index(&mut r)] += 1;
        }
        assert!((counts[0] as f64 / 40_000.0 - 0.5).abs() < 0.02);
        assert!((counts[1] as f64 / 40_000.0 - 0.25).abs() < 0.02);
    }
}
