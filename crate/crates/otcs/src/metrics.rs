//! Evaluation of conditional generation against the estimated plan:
//! conditional plan densities, 1-D Wasserstein-2 distances (Gaussian
//! approximation and exact quantile coupling), the expected distance over a
//! set of probe conditions, and histogram emission.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ot::EmpiricalMeasure;
use crate::potentials::PotentialPair;
use crate::rng;

/// First two moments of a sample set or weighted support, per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianSummary {
    /// Unbiased sample estimator; needs at least two samples for the std.
    pub fn from_samples(samples: &Array2<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n < 2 {
            return Err(Error::invalid("summary", "need >= 2 samples for a std estimate"));
        }
        let mean = samples.mean_axis(Axis(0)).unwrap();
        let mut var = Array1::<f64>::zeros(samples.ncols());
        for row in samples.rows() {
            for (d, v) in row.iter().enumerate() {
                let c = v - mean[d];
                var[d] += c * c;
            }
        }
        var.mapv_inplace(|v| v / (n - 1) as f64);
        Ok(GaussianSummary { mean: mean.to_vec(), std: var.mapv(f64::sqrt).to_vec() })
    }

    /// Population moments of a weighted discrete distribution.
    pub fn from_weighted(points: &Array2<f64>, weights: ArrayView1<'_, f64>) -> Result<Self> {
        let total: f64 = weights.sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass("weighted summary".into()));
        }
        let d = points.ncols();
        let mut mean = vec![0.0; d];
        for (row, w) in points.rows().into_iter().zip(weights.iter()) {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += w * v / total;
            }
        }
        let mut var = vec![0.0; d];
        for (row, w) in points.rows().into_iter().zip(weights.iter()) {
            for (k, v) in row.iter().enumerate() {
                let c = v - mean[k];
                var[k] += w * c * c / total;
            }
        }
        Ok(GaussianSummary { mean, std: var.iter().map(|v| v.sqrt()).collect() })
    }

    pub fn scalar(&self) -> (f64, f64) {
        (self.mean[0], self.std[0])
    }
}

/// `π̂(· | x)` over the support of `q`: entries proportional to
/// `H(x, y_j) q_j`, normalized.
pub fn conditional_plan_density(
    pp: &PotentialPair,
    x: ArrayView1<'_, f64>,
    q: &EmpiricalMeasure,
) -> Result<Array1<f64>> {
    let h = pp.compatibility_against(x, q.coords_view())?;
    let mut density: Array1<f64> = &h * q.weights();
    let total = density.sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass("conditional plan for this condition".into()));
    }
    density.mapv_inplace(|v| v / total);
    Ok(density)
}

/// Wasserstein-2 distance between two 1-D Gaussians:
/// `sqrt((μa-μb)² + (σa-σb)²)`.
pub fn gaussian_w2_1d(a: &GaussianSummary, b: &GaussianSummary) -> f64 {
    let (ma, sa) = a.scalar();
    let (mb, sb) = b.scalar();
    ((ma - mb).powi(2) + (sa - sb).powi(2)).sqrt()
}

/// Exact 1-D Wasserstein-2 between weighted empirical measures via the
/// quantile coupling: sort both supports and transport mass in CDF order.
pub fn empirical_w2_1d(
    xs: &[f64],
    x_weights: &[f64],
    ys: &[f64],
    y_weights: &[f64],
) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::ZeroMass("empirical W2 input".into()));
    }
    let sort = |vals: &[f64], ws: &[f64]| -> Vec<(f64, f64)> {
        let total: f64 = ws.iter().sum();
        let mut pairs: Vec<(f64, f64)> =
            vals.iter().zip(ws.iter()).map(|(v, w)| (*v, *w / total)).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pairs
    };
    let a = sort(xs, x_weights);
    let b = sort(ys, y_weights);
    let mut i = 0;
    let mut j = 0;
    let mut mass_a = a[0].1;
    let mut mass_b = b[0].1;
    let mut total = 0.0;
    loop {
        let m = mass_a.min(mass_b);
        let d = a[i].0 - b[j].0;
        total += m * d * d;
        mass_a -= m;
        mass_b -= m;
        if mass_a <= 1e-15 {
            i += 1;
            if i == a.len() {
                break;
            }
            mass_a = a[i].1;
        }
        if mass_b <= 1e-15 {
            j += 1;
            if j == b.len() {
                break;
            }
            mass_b = b[j].1;
        }
    }
    Ok(total.sqrt())
}

/// 1-D quantile points of a sample column at ranks `(k+0.5)/n_probes`.
pub fn quantile_points(samples: &Array1<f64>, n_probes: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (0..n_probes)
        .map(|k| {
            let rank = (k as f64 + 0.5) / n_probes as f64;
            let pos = rank * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        })
        .collect()
}

/// Per-probe detail row of [`expected_w2`].
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub condition: Vec<f64>,
    pub sample_summary: GaussianSummary,
    pub plan_summary: GaussianSummary,
    pub w2_gaussian: f64,
    pub w2_empirical: f64,
}

/// Result of [`expected_w2`]: the Gaussian-approximated expectation (the
/// headline number) alongside the exact empirical variant, which stays
/// meaningful when conditionals are multimodal.
#[derive(Debug, Clone, Serialize)]
pub struct ExpectedW2 {
    pub gaussian: f64,
    pub empirical: f64,
    pub skipped_probes: usize,
    pub probes: Vec<ProbeReport>,
}

/// Average 1-D W2 between generated conditionals and the plan conditionals
/// over a set of probe conditions.
///
/// `generate(x, n, probe_seed)` produces `n` samples for probe `x`. The
/// per-probe seed is derived from the probe's coordinate bits, so the result
/// does not depend on probe order. Probes whose plan mass is zero are
/// skipped and counted.
pub fn expected_w2(
    pp: &PotentialPair,
    q: &EmpiricalMeasure,
    probes: &[Array1<f64>],
    n_samples: usize,
    generate: &mut dyn FnMut(ArrayView1<'_, f64>, usize, u64) -> Result<Array2<f64>>,
) -> Result<ExpectedW2> {
    let mut reports = Vec::new();
    let mut skipped = 0usize;
    for x in probes {
        let density = match conditional_plan_density(pp, x.view(), q) {
            Ok(d) => d,
            Err(Error::ZeroMass(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let probe_seed = seed_from_coords(x.view());
        let samples = generate(x.view(), n_samples, probe_seed)?;
        let sample_summary = GaussianSummary::from_samples(&samples)?;
        let plan_summary = GaussianSummary::from_weighted(&q.coords_view().to_owned(), density.view())?;
        let w2_gaussian = gaussian_w2_1d(&sample_summary, &plan_summary);
        let sample_col: Vec<f64> = samples.column(0).to_vec();
        let uniform = vec![1.0; sample_col.len()];
        let support: Vec<f64> = q.coords_view().column(0).to_vec();
        let w2_empirical =
            empirical_w2_1d(&sample_col, &uniform, &support, density.as_slice().unwrap())?;
        reports.push(ProbeReport {
            condition: x.to_vec(),
            sample_summary,
            plan_summary,
            w2_gaussian,
            w2_empirical,
        });
    }
    if reports.is_empty() {
        return Err(Error::ZeroMass("every probe had zero plan mass".into()));
    }
    let n = reports.len() as f64;
    Ok(ExpectedW2 {
        gaussian: reports.iter().map(|r| r.w2_gaussian).sum::<f64>() / n,
        empirical: reports.iter().map(|r| r.w2_empirical).sum::<f64>() / n,
        skipped_probes: skipped,
        probes: reports,
    })
}

/// Deterministic seed from coordinate bit patterns (probe-order invariant).
pub fn seed_from_coords(x: ArrayView1<'_, f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x.iter() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draw from a categorical distribution over `q`'s support; the oracle
/// sampler for "exact draws from the conditional plan".
pub fn categorical_sampler(
    q: &EmpiricalMeasure,
    density: &Array1<f64>,
    n: usize,
    seed: u64,
) -> Array2<f64> {
    let mut rng = rng::stream(seed, rng::purpose::EVAL, &[]);
    let mut out = Array2::zeros((n, q.dim()));
    let mut cdf = Vec::with_capacity(density.len());
    let mut acc = 0.0;
    for w in density.iter() {
        acc += w;
        cdf.push(acc);
    }
    for mut row in out.rows_mut() {
        let u: f64 = rng.gen();
        let idx = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) | Err(i) => i.min(density.len() - 1),
        };
        row.assign(&q.point(idx));
    }
    out
}

/// A density-normalized histogram: integrates to 1 over its range.
#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

pub fn histogram(samples: &[f64], n_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::invalid("histogram", "need at least one sample"));
    }
    if n_bins == 0 || !(range.1 > range.0) || !range.0.is_finite() || !range.1.is_finite() {
        return Err(Error::invalid("histogram", "need n_bins >= 1 and a finite range"));
    }
    let width = (range.1 - range.0) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    let mut kept = 0usize;
    for s in samples {
        if *s < range.0 || *s > range.1 {
            continue;
        }
        let mut idx = ((s - range.0) / width) as usize;
        if idx == n_bins {
            idx -= 1;
        }
        counts[idx] += 1;
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::ZeroMass("no samples in histogram range".into()));
    }
    let densities =
        counts.iter().map(|c| *c as f64 / (kept as f64 * width)).collect::<Vec<f64>>();
    let edges = (0..=n_bins).map(|i| range.0 + i as f64 * width).collect();
    Ok(Histogram { edges, densities })
}

impl Histogram {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bin_left,bin_right,density")?;
        for (i, d) in self.densities.iter().enumerate() {
            writeln!(f, "{},{},{}", self.edges[i], self.edges[i + 1], d)?;
        }
        Ok(())
    }

    /// Minimal standalone SVG: histogram bars plus an optional overlay
    /// polyline (e.g. the conditional plan density).
    pub fn write_svg(&self, path: &Path, overlay: Option<&[(f64, f64)]>) -> Result<()> {
        let (w, h, pad) = (640.0, 400.0, 40.0);
        let x_min = self.edges[0];
        let x_max = *self.edges.last().unwrap();
        let y_max = self
            .densities
            .iter()
            .copied()
            .chain(overlay.into_iter().flatten().map(|(_, y)| *y))
            .fold(0.0f64, f64::max)
            .max(1e-12)
            * 1.1;
        let sx = |x: f64| pad + (x - x_min) / (x_max - x_min) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - y / y_max * (h - 2.0 * pad);
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        ));
        svg.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
        ));
        for (i, d) in self.densities.iter().enumerate() {
            let x0 = sx(self.edges[i]);
            let x1 = sx(self.edges[i + 1]);
            let y = sy(*d);
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#6699cc\" stroke=\"#335577\" stroke-width=\"0.5\"/>\n",
                x0,
                y,
                (x1 - x0).max(0.0),
                (h - pad - y).max(0.0)
            ));
        }
        if let Some(points) = overlay {
            let path_d: Vec<String> = points
                .iter()
                .enumerate()
                .map(|(k, (x, y))| {
                    format!("{}{:.2},{:.2}", if k == 0 { "M" } else { "L" }, sx(*x), sy(*y))
                })
                .collect();
            svg.push_str(&format!(
                "<path d=\"{}\" fill=\"none\" stroke=\"#cc3333\" stroke-width=\"1.5\"/>\n",
                path_d.join(" ")
            ));
        }
        svg.push_str(&format!(
            "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - pad,
            w - pad,
            h - pad
        ));
        svg.push_str(&format!(
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - pad
        ));
        svg.push_str("</svg>\n");
        std::fs::write(path, svg)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::ot::{CostKind, OtProblem};
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    fn g1(mean: f64, std: f64) -> GaussianSummary {
        GaussianSummary { mean: vec![mean], std: vec![std] }
    }

    #[test]
    fn gaussian_w2_examples() {
        let a = g1(0.3, 1.2);
        assert_eq!(gaussian_w2_1d(&a, &a), 0.0);
        assert!((gaussian_w2_1d(&g1(-4.0, 1.0), &g1(4.0, 1.0)) - 8.0).abs() < 1e-12);
        assert!((gaussian_w2_1d(&g1(0.0, 1.0), &g1(0.0, 2.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_w2_translated_masses() {
        // Point masses at 0 and 1 vs 2 and 3: quantile coupling pairs them
        // in order, so the distance is 2.
        let d = empirical_w2_1d(&[0.0, 1.0], &[0.5, 0.5], &[2.0, 3.0], &[0.5, 0.5]).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        // self distance
        let d = empirical_w2_1d(&[0.0, 1.0], &[0.5, 0.5], &[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn plan_density_uniform_h_returns_q_weights() {
        // Lift u far enough that every slack is positive and dominated by
        // the constant, making H nearly uniform over a tight support.
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.5).unwrap();
        let mut pp = crate::potentials::PotentialPair::init(problem, 1, 1, &[8], Activation::Tanh, 2);
        pp.omega.iter_mut().for_each(|w| *w = 0.0);
        let nu = pp.u_spec.param_count();
        pp.omega[nu - 1] = 1e6;
        let q = EmpiricalMeasure::new(
            arr2(&[[0.0], [1e-3], [2e-3]]),
            arr1(&[0.5, 0.25, 0.25]),
        )
        .unwrap();
        let d = conditional_plan_density(&pp, arr1(&[0.0]).view(), &q).unwrap();
        for (dj, qj) in d.iter().zip(q.weights().iter()) {
            assert!((dj - qj).abs() < 1e-6);
        }
    }

    #[test]
    fn histogram_normalizes_to_unit_integral() {
        let hist = histogram(&[1.0, 1.0, 1.0], 1, (0.0, 2.0)).unwrap();
        assert!((hist.densities[0] - 0.5).abs() < 1e-12);
        let samples: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let hist = histogram(&samples, 7, (0.0, 1.0)).unwrap();
        let width = 1.0 / 7.0;
        let integral: f64 = hist.densities.iter().map(|d| d * width).sum();
        assert!((integral - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_matches_gaussian_pdf() {
        // 1e5 draws from N(4,1) against the true density.
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::stream(12, "test/hist", &[]);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                4.0 + z
            })
            .collect();
        let hist = histogram(&samples, 50, (0.0, 8.0)).unwrap();
        let pdf = |x: f64| (-0.5 * (x - 4.0) * (x - 4.0)).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let width = 8.0 / 50.0;
        let max_dev = hist
            .densities
            .iter()
            .enumerate()
            .map(|(i, d)| (d - pdf(hist.edges[i] + 0.5 * width)).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev <= 0.05, "max deviation {max_dev}");
    }

    #[test]
    fn expected_w2_self_distance_is_small() {
        // Oracle categorical sampler drawing from the plan conditional
        // itself: the expected W2 must vanish up to sampling noise.
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.5).unwrap();
        let mut pp = crate::potentials::PotentialPair::init(problem, 1, 1, &[8], Activation::Tanh, 3);
        pp.omega.iter_mut().for_each(|w| *w = 0.0);
        let nu = pp.u_spec.param_count();
        pp.omega[nu - 1] = 100.0;
        let q = EmpiricalMeasure::uniform(arr2(&[[3.0], [4.0], [5.0]])).unwrap();
        let probes = vec![arr1(&[-4.0]), arr1(&[-3.0])];
        let q2 = q.clone();
        let pp2 = pp.clone();
        let mut generate = move |x: ArrayView1<'_, f64>, n: usize, seed: u64| {
            let density = conditional_plan_density(&pp2, x, &q2)?;
            Ok(categorical_sampler(&q2, &density, n, seed))
        };
        let out = expected_w2(&pp, &q, &probes, 10_000, &mut generate).unwrap();
        assert!(out.gaussian <= 0.1, "gaussian self distance {}", out.gaussian);
        assert!(out.empirical <= 0.1, "empirical self distance {}", out.empirical);
        assert_eq!(out.skipped_probes, 0);
    }

    #[test]
    fn expected_w2_is_probe_order_invariant() {
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.5).unwrap();
        let mut pp = crate::potentials::PotentialPair::init(problem, 1, 1, &[8], Activation::Tanh, 4);
        pp.omega.iter_mut().for_each(|w| *w = 0.0);
        let nu = pp.u_spec.param_count();
        pp.omega[nu - 1] = 100.0;
        let q = EmpiricalMeasure::uniform(arr2(&[[3.0], [4.0], [5.0]])).unwrap();
        let probes_a = vec![arr1(&[-4.0]), arr1(&[-3.0]), arr1(&[-5.0])];
        let probes_b = vec![arr1(&[-5.0]), arr1(&[-4.0]), arr1(&[-3.0])];
        let run = |probes: &[Array1<f64>]| {
            let q2 = q.clone();
            let pp2 = pp.clone();
            let mut generate = move |x: ArrayView1<'_, f64>, n: usize, seed: u64| {
                let density = conditional_plan_density(&pp2, x, &q2)?;
                Ok(categorical_sampler(&q2, &density, n, seed))
            };
            expected_w2(&pp, &q, probes, 500, &mut generate).unwrap().gaussian
        };
        assert_eq!(run(&probes_a), run(&probes_b));
    }

    proptest! {
        #[test]
        fn gaussian_w2_is_a_metric(ma in -5.0..5.0f64, sa in 0.1..3.0f64,
                                   mb in -5.0..5.0f64, sb in 0.1..3.0f64,
                                   mc in -5.0..5.0f64, sc in 0.1..3.0f64) {
            let (a, b, c) = (g1(ma, sa), g1(mb, sb), g1(mc, sc));
            // symmetry
            prop_assert!((gaussian_w2_1d(&a, &b) - gaussian_w2_1d(&b, &a)).abs() < 1e-12);
            // identity of indiscernibles
            prop_assert!(gaussian_w2_1d(&a, &a) == 0.0);
            if (ma, sa) != (mb, sb) {
                prop_assert!(gaussian_w2_1d(&a, &b) > 0.0);
            }
            // triangle inequality
            prop_assert!(gaussian_w2_1d(&a, &c) <= gaussian_w2_1d(&a, &b) + gaussian_w2_1d(&b, &c) + 1e-12);
        }
    }
}
