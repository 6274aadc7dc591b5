//! Problem definitions for L2-regularized optimal transport: sample points,
//! empirical measures, matched keypoints, cost functions, relation vectors,
//! keypoint masks, and the guiding cost used in the semi-supervised setting.
//!
//! Everything here is pure and reentrant.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Natural-log JS divergence saturates at ln 2.
pub const LN_2: f64 = std::f64::consts::LN_2;

/// A sample coordinate vector. All coordinates are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    coords: Array1<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("point", "dimension must be >= 1"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("point", "coordinates must be finite"));
        }
        Ok(Point { coords: Array1::from(coords) })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Point::new(vec![v])
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.coords.view()
    }

    pub fn coords(&self) -> &Array1<f64> {
        &self.coords
    }
}

impl From<Array1<f64>> for Point {
    fn from(coords: Array1<f64>) -> Self {
        Point { coords }
    }
}

/// A finitely supported probability measure: points plus masses.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    coords: Array2<f64>,
    weights: Array1<f64>,
    /// Cumulative weights, for weighted index sampling.
    cdf: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(coords: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if coords.nrows() == 0 {
            return Err(Error::invalid("measure", "must contain at least one point"));
        }
        if coords.nrows() != weights.len() {
            return Err(Error::invalid(
                "measure",
                format!("{} points but {} weights", coords.nrows(), weights.len()),
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("measure", "coordinates must be finite"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("measure", "weights must be finite and nonnegative"));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "measure",
                format!("weights sum to {total}, expected 1 within 1e-9"),
            ));
        }
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in weights.iter() {
            acc += w;
            cdf.push(acc);
        }
        Ok(EmpiricalMeasure { coords, weights, cdf })
    }

    pub fn uniform(coords: Array2<f64>) -> Result<Self> {
        let n = coords.nrows();
        let weights = Array1::from_elem(n, 1.0 / n as f64);
        EmpiricalMeasure::new(coords, weights)
    }

    /// One row per point, columns are coordinates; when `has_weight_column`
    /// is set the trailing column is the point's mass.
    pub fn from_csv(path: &Path, has_weight_column: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "no data rows".into(),
            });
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "rows have inconsistent column counts".into(),
            });
        }
        let dim = if has_weight_column { width - 1 } else { width };
        if dim == 0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "no coordinate columns".into(),
            });
        }
        let n = rows.len();
        let mut coords = Array2::zeros((n, dim));
        let mut weights = Array1::from_elem(n, 1.0 / n as f64);
        for (i, row) in rows.iter().enumerate() {
            for d in 0..dim {
                coords[[i, d]] = row[d];
            }
            if has_weight_column {
                weights[i] = row[dim];
            }
        }
        EmpiricalMeasure::new(coords, weights)
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords_view(&self) -> ArrayView2<'_, f64> {
        self.coords.view()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.coords.row(i)
    }

    /// Weighted index draw.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        match self.cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) | Err(i) => i.min(self.len() - 1),
        }
    }
}

/// Matched source/target pairs guiding the semi-supervised problem.
///
/// Keypoints are concrete dataset points; coincidence checks against them use
/// exact coordinate equality, which is well-defined because keypoints are
/// taken from the datasets themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    source: Array2<f64>,
    target: Array2<f64>,
}

impl KeypointSet {
    pub fn new(source: Array2<f64>, target: Array2<f64>) -> Result<Self> {
        if source.nrows() == 0 {
            return Err(Error::invalid("keypoints", "need at least one pair"));
        }
        if source.nrows() != target.nrows() {
            return Err(Error::invalid("keypoints", "source/target pair counts differ"));
        }
        for (name, block) in [("source", &source), ("target", &target)] {
            for i in 0..block.nrows() {
                for j in (i + 1)..block.nrows() {
                    if block.row(i) == block.row(j) {
                        return Err(Error::invalid(
                            "keypoints",
                            format!("{name} keypoints {i} and {j} coincide"),
                        ));
                    }
                }
            }
        }
        Ok(KeypointSet { source, target })
    }

    /// Build from dataset indices, enforcing the feasibility requirement that
    /// each pair's source mass equals its target mass.
    pub fn from_indices(
        p: &EmpiricalMeasure,
        q: &EmpiricalMeasure,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let k = pairs.len();
        if k == 0 {
            return Err(Error::invalid("keypoints", "need at least one pair"));
        }
        let mut source = Array2::zeros((k, p.dim()));
        let mut target = Array2::zeros((k, q.dim()));
        for (row, &(i, j)) in pairs.iter().enumerate() {
            if i >= p.len() || j >= q.len() {
                return Err(Error::invalid(
                    "keypoints",
                    format!("index pair ({i}, {j}) out of range"),
                ));
            }
            let (pi, qj) = (p.weights()[i], q.weights()[j]);
            if (pi - qj).abs() > 1e-9 {
                return Err(Error::Infeasible(format!(
                    "keypoint pair ({i}, {j}) has masses {pi} != {qj}"
                )));
            }
            source.row_mut(row).assign(&p.point(i));
            target.row_mut(row).assign(&q.point(j));
        }
        KeypointSet::new(source, target)
    }

    /// `(source_index, target_index)` per row.
    pub fn load_index_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let parse = |f: Option<&str>| -> Result<usize> {
                f.ok_or(())
                    .and_then(|s| s.parse::<usize>().map_err(|_| ()))
                    .map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        message: format!("line {}: expected `source_index,target_index`", lineno + 1),
                    })
            };
            let i = parse(fields.next())?;
            let j = parse(fields.next())?;
            pairs.push((i, j));
        }
        Ok(pairs)
    }

    pub fn count(&self) -> usize {
        self.source.nrows()
    }

    pub fn source(&self) -> ArrayView2<'_, f64> {
        self.source.view()
    }

    pub fn target(&self) -> ArrayView2<'_, f64> {
        self.target.view()
    }

    fn find(block: ArrayView2<'_, f64>, z: ArrayView1<'_, f64>) -> Option<usize> {
        (0..block.nrows()).find(|&k| block.row(k) == z)
    }
}

/// Which transport problem is being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OtMode {
    Unsupervised,
    SemiSupervised,
}

impl OtMode {
    pub fn name(self) -> &'static str {
        match self {
            OtMode::Unsupervised => "unsupervised",
            OtMode::SemiSupervised => "semi_supervised",
        }
    }
}

/// Ground cost between points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostKind {
    SquaredL2,
    /// Squared L2 divided by the dimension.
    MeanSquaredL2,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::SquaredL2 => "squared_l2",
            CostKind::MeanSquaredL2 => "mean_squared_l2",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "squared_l2" => Ok(CostKind::SquaredL2),
            "mean_squared_l2" => Ok(CostKind::MeanSquaredL2),
            other => Err(Error::invalid("cost", format!("unknown kind `{other}`"))),
        }
    }
}

/// Configuration of one L2-regularized OT instance.
#[derive(Debug, Clone)]
pub struct OtProblem {
    pub mode: OtMode,
    pub cost_kind: CostKind,
    pub epsilon: f64,
    pub tau: f64,
    pub keypoints: Option<KeypointSet>,
}

impl OtProblem {
    pub fn unsupervised(cost_kind: CostKind, epsilon: f64) -> Result<Self> {
        OtProblem::build(OtMode::Unsupervised, cost_kind, epsilon, 0.1, None)
    }

    pub fn semi_supervised(
        cost_kind: CostKind,
        epsilon: f64,
        tau: f64,
        keypoints: KeypointSet,
    ) -> Result<Self> {
        OtProblem::build(OtMode::SemiSupervised, cost_kind, epsilon, tau, Some(keypoints))
    }

    fn build(
        mode: OtMode,
        cost_kind: CostKind,
        epsilon: f64,
        tau: f64,
        keypoints: Option<KeypointSet>,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("ot.epsilon", "must be > 0"));
        }
        if !(tau > 0.0) {
            return Err(Error::invalid("ot.tau", "must be > 0"));
        }
        if mode == OtMode::SemiSupervised && keypoints.is_none() {
            return Err(Error::invalid("ot.keypoints", "semi-supervised mode needs keypoints"));
        }
        Ok(OtProblem { mode, cost_kind, epsilon, tau, keypoints })
    }

    pub fn cost(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
        cost(self.cost_kind, x, y)
    }

    /// Relation vector of a source-domain point to the source keypoints.
    pub fn source_relation(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let kp = self.require_keypoints()?;
        relation_vector(x, kp.source(), self.tau, self.cost_kind)
    }

    /// Relation vector of a target-domain point to the target keypoints.
    pub fn target_relation(&self, y: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let kp = self.require_keypoints()?;
        relation_vector(y, kp.target(), self.tau, self.cost_kind)
    }

    /// JS divergence between the two relation vectors.
    pub fn guiding_cost(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(js_divergence(
            self.source_relation(x)?.view(),
            self.target_relation(y)?.view(),
        ))
    }

    /// Keypoint mask: 0 exactly when one of the points coincides with a
    /// keypoint and the other is not its partner. Always 1 when unsupervised.
    pub fn mask(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        let Some(kp) = self.keypoints.as_ref() else {
            return 1.0;
        };
        let kx = KeypointSet::find(kp.source(), x);
        let ky = KeypointSet::find(kp.target(), y);
        match (kx, ky) {
            (Some(a), Some(b)) if a == b => 1.0,
            (None, None) => 1.0,
            _ => 0.0,
        }
    }

    /// Mask looked up by dataset indices.
    pub fn mask_indices(
        &self,
        p: &EmpiricalMeasure,
        q: &EmpiricalMeasure,
        i: usize,
        j: usize,
    ) -> f64 {
        self.mask(p.point(i), q.point(j))
    }

    /// The cost entering the dual: ground cost when unsupervised, guiding
    /// cost when semi-supervised.
    pub fn xi(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
        match self.mode {
            OtMode::Unsupervised => self.cost(x, y),
            OtMode::SemiSupervised => self.guiding_cost(x, y),
        }
    }

    /// Gradient of `xi` with respect to the target point.
    pub fn grad_y_xi(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        match self.mode {
            OtMode::Unsupervised => grad_y_cost(self.cost_kind, x, y),
            OtMode::SemiSupervised => self.grad_y_guiding(x, y),
        }
    }

    fn grad_y_guiding(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let kp = self.require_keypoints()?;
        let a = self.source_relation(x)?;
        let b = self.target_relation(y)?;
        // dJS/db_j = (1/2) ln(b_j / m_j) with m = (a+b)/2. Relation entries
        // are positive in exact arithmetic but can underflow to zero; the
        // b_j·ln(b_j) product then vanishes, so the term contributes nothing.
        let djs: Array1<f64> = b
            .iter()
            .zip(a.iter())
            .map(|(&bj, &aj)| {
                if bj > 0.0 {
                    0.5 * (bj / (0.5 * (aj + bj))).ln()
                } else {
                    0.0
                }
            })
            .collect();
        // b = softmax(l), l_k = -c(y, y_k)/tau; chain through both.
        let k = kp.count();
        let mut dl = Array2::zeros((k, y.len()));
        for kk in 0..k {
            let g = grad_y_cost(self.cost_kind, kp.target().row(kk), y)?;
            dl.row_mut(kk).assign(&(-&g / self.tau));
        }
        // db_j/dy = b_j (dl_j - sum_k b_k dl_k)
        let mean_dl: Array1<f64> = b.dot(&dl);
        let mut grad = Array1::zeros(y.len());
        for j in 0..k {
            let row = dl.row(j);
            for d in 0..y.len() {
                grad[d] += djs[j] * b[j] * (row[d] - mean_dl[d]);
            }
        }
        Ok(grad)
    }

    fn require_keypoints(&self) -> Result<&KeypointSet> {
        self.keypoints
            .as_ref()
            .ok_or(Error::WrongMode { required: "semi-supervised" })
    }

    /// Pairwise `xi` and mask over two point blocks, batched. Relation
    /// vectors and keypoint-coincidence lookups are computed once per point
    /// rather than once per pair.
    pub fn xi_matrix(
        &self,
        xs: ArrayView2<'_, f64>,
        ys: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (n, m) = (xs.nrows(), ys.nrows());
        let mut xi = Array2::zeros((n, m));
        let mut mask = Array2::from_elem((n, m), 1.0);
        match self.mode {
            OtMode::Unsupervised => {
                if xs.ncols() != ys.ncols() {
                    return Err(Error::DimensionMismatch { expected: xs.ncols(), got: ys.ncols() });
                }
                let scale = match self.cost_kind {
                    CostKind::SquaredL2 => 1.0,
                    CostKind::MeanSquaredL2 => 1.0 / xs.ncols() as f64,
                };
                let d = xs.ncols();
                for i in 0..n {
                    let xr = xs.row(i);
                    for j in 0..m {
                        let yr = ys.row(j);
                        let mut sq = 0.0;
                        for k in 0..d {
                            let diff = xr[k] - yr[k];
                            sq += diff * diff;
                        }
                        xi[[i, j]] = scale * sq;
                    }
                }
            }
            OtMode::SemiSupervised => {
                let kp = self.require_keypoints()?;
                let rel_x: Vec<Array1<f64>> = xs
                    .axis_iter(Axis(0))
                    .map(|x| self.source_relation(x))
                    .collect::<Result<_>>()?;
                let rel_y: Vec<Array1<f64>> = ys
                    .axis_iter(Axis(0))
                    .map(|y| self.target_relation(y))
                    .collect::<Result<_>>()?;
                let hit_x: Vec<Option<usize>> = xs
                    .axis_iter(Axis(0))
                    .map(|x| KeypointSet::find(kp.source(), x))
                    .collect();
                let hit_y: Vec<Option<usize>> = ys
                    .axis_iter(Axis(0))
                    .map(|y| KeypointSet::find(kp.target(), y))
                    .collect();
                for i in 0..n {
                    for j in 0..m {
                        xi[[i, j]] = js_divergence(rel_x[i].view(), rel_y[j].view());
                        mask[[i, j]] = match (hit_x[i], hit_y[j]) {
                            (Some(a), Some(b)) if a == b => 1.0,
                            (None, None) => 1.0,
                            _ => 0.0,
                        };
                    }
                }
            }
        }
        Ok((xi, mask))
    }
}

/// Ground cost between two points.
pub fn cost(kind: CostKind, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(match kind {
        CostKind::SquaredL2 => sq,
        CostKind::MeanSquaredL2 => sq / x.len() as f64,
    })
}

/// Gradient of the ground cost with respect to `y`.
pub fn grad_y_cost(kind: CostKind, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    let scale = match kind {
        CostKind::SquaredL2 => 2.0,
        CostKind::MeanSquaredL2 => 2.0 / x.len() as f64,
    };
    Ok(x.iter().zip(y.iter()).map(|(a, b)| scale * (b - a)).collect())
}

/// Softmax of `-c(z, z_k)/tau` over the keypoints of one domain, computed
/// with max-subtraction.
pub fn relation_vector(
    z: ArrayView1<'_, f64>,
    keypoints: ArrayView2<'_, f64>,
    tau: f64,
    kind: CostKind,
) -> Result<Array1<f64>> {
    let k = keypoints.nrows();
    let mut logits = Array1::zeros(k);
    for (slot, kp) in logits.iter_mut().zip(keypoints.axis_iter(Axis(0))) {
        *slot = -cost(kind, z, kp)? / tau;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logits.mapv_inplace(|l| (l - max).exp());
    let total = logits.sum();
    logits.mapv_inplace(|e| e / total);
    Ok(logits)
}

/// Jensen–Shannon divergence with the natural logarithm. `0·ln 0` counts as
/// zero, so disjoint supports are fine; the result lies in `[0, ln 2]`.
pub fn js_divergence(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut total = 0.0;
    for (&ai, &bi) in a.iter().zip(b.iter()) {
        let mi = 0.5 * (ai + bi);
        if ai > 0.0 {
            total += 0.5 * ai * (ai / mi).ln();
        }
        if bi > 0.0 {
            total += 0.5 * bi * (bi / mi).ln();
        }
    }
    total.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    fn p1(v: f64) -> Point {
        Point::scalar(v).unwrap()
    }

    #[test]
    fn cost_examples() {
        let x = p1(0.0);
        assert_eq!(cost(CostKind::SquaredL2, x.view(), x.view()).unwrap(), 0.0);
        assert_eq!(
            cost(CostKind::SquaredL2, p1(-4.0).view(), p1(4.0).view()).unwrap(),
            64.0
        );
        let a = Point::new(vec![0.0, 0.0]).unwrap();
        let b = Point::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(cost(CostKind::MeanSquaredL2, a.view(), b.view()).unwrap(), 12.5);
    }

    #[test]
    fn cost_dimension_mismatch() {
        let a = Point::new(vec![0.0, 0.0]).unwrap();
        let b = p1(1.0);
        assert!(cost(CostKind::SquaredL2, a.view(), b.view()).is_err());
    }

    #[test]
    fn relation_vector_examples() {
        let kp = arr2(&[[5.0]]);
        let r = relation_vector(arr1(&[1.0]).view(), kp.view(), 0.1, CostKind::SquaredL2).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0] - 1.0).abs() < 1e-12);

        // equidistant keypoints
        let kp = arr2(&[[-1.0], [1.0]]);
        let r = relation_vector(arr1(&[0.0]).view(), kp.view(), 0.1, CostKind::SquaredL2).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-12);
        assert!((r[1] - 0.5).abs() < 1e-12);

        // costs (0, 0.1) at tau 0.1 -> softmax(0, -1)
        let kp = arr2(&[[0.0], [f64::sqrt(0.1)]]);
        let r = relation_vector(arr1(&[0.0]).view(), kp.view(), 0.1, CostKind::SquaredL2).unwrap();
        assert!((r[0] - 0.7311).abs() < 1e-4);
        assert!((r[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn js_examples() {
        let a = arr1(&[0.3, 0.7]);
        assert_eq!(js_divergence(a.view(), a.view()), 0.0);
        let d = js_divergence(arr1(&[1.0, 0.0]).view(), arr1(&[0.0, 1.0]).view());
        assert!((d - LN_2).abs() < 1e-6);
    }

    fn two_cluster_problem() -> (EmpiricalMeasure, EmpiricalMeasure, OtProblem) {
        let p = EmpiricalMeasure::uniform(arr2(&[[-4.0], [-3.0], [4.0], [3.0]])).unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[-5.0], [-6.0], [5.0], [6.0]])).unwrap();
        let kp = KeypointSet::from_indices(&p, &q, &[(0, 0), (2, 2)]).unwrap();
        let problem =
            OtProblem::semi_supervised(CostKind::SquaredL2, 1e-3, 0.1, kp).unwrap();
        (p, q, problem)
    }

    #[test]
    fn guiding_cost_is_zero_on_a_keypoint_pair() {
        let (p, q, problem) = two_cluster_problem();
        let g = problem.guiding_cost(p.point(0), q.point(0)).unwrap();
        assert!(g.abs() < 1e-12);
        // near-disjoint relation vectors approach ln 2
        let g = problem.guiding_cost(p.point(0), q.point(2)).unwrap();
        assert!(g > LN_2 - 1e-6);
    }

    #[test]
    fn mask_examples() {
        let (p, q, problem) = two_cluster_problem();
        // keypoint pair
        assert_eq!(problem.mask_indices(&p, &q, 0, 0), 1.0);
        // keypoint source with a non-partner target
        assert_eq!(problem.mask_indices(&p, &q, 0, 1), 0.0);
        assert_eq!(problem.mask_indices(&p, &q, 0, 2), 0.0);
        // neither is a keypoint
        assert_eq!(problem.mask_indices(&p, &q, 1, 1), 1.0);
        // unsupervised mask is identically 1
        let unsup = OtProblem::unsupervised(CostKind::SquaredL2, 1.0).unwrap();
        assert_eq!(unsup.mask(p.point(0), q.point(1)), 1.0);
    }

    #[test]
    fn xi_delegates_by_mode() {
        let unsup = OtProblem::unsupervised(CostKind::SquaredL2, 1.0).unwrap();
        let x = p1(-4.0);
        let y = p1(4.0);
        assert_eq!(unsup.xi(x.view(), y.view()).unwrap(), 64.0);

        let (p, q, problem) = two_cluster_problem();
        assert!(problem.xi(p.point(0), q.point(0)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn grad_y_guiding_matches_finite_differences() {
        let (p, q, problem) = two_cluster_problem();
        let y0 = q.point(1).to_owned();
        let x = p.point(1);
        let g = problem.grad_y_xi(x, y0.view()).unwrap();
        let h = 1e-6;
        for d in 0..y0.len() {
            let mut plus = y0.clone();
            let mut minus = y0.clone();
            plus[d] += h;
            minus[d] -= h;
            let fd = (problem.xi(x, plus.view()).unwrap() - problem.xi(x, minus.view()).unwrap())
                / (2.0 * h);
            assert!((fd - g[d]).abs() < 1e-6, "fd {fd} vs analytic {}", g[d]);
        }
    }

    #[test]
    fn keypoint_mass_mismatch_is_rejected() {
        let p = EmpiricalMeasure::new(
            arr2(&[[0.0], [1.0]]),
            arr1(&[0.25, 0.75]),
        )
        .unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[0.0], [1.0]])).unwrap();
        let err = KeypointSet::from_indices(&p, &q, &[(0, 0)]).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn measure_weight_validation() {
        let bad = EmpiricalMeasure::new(arr2(&[[0.0], [1.0]]), arr1(&[0.6, 0.6]));
        assert!(bad.is_err());
        let neg = EmpiricalMeasure::new(arr2(&[[0.0], [1.0]]), arr1(&[-0.2, 1.2]));
        assert!(neg.is_err());
    }

    proptest! {
        #[test]
        fn js_is_symmetric_and_bounded(raw_a in prop::collection::vec(1e-6..1.0f64, 4),
                                       raw_b in prop::collection::vec(1e-6..1.0f64, 4)) {
            let sa: f64 = raw_a.iter().sum();
            let sb: f64 = raw_b.iter().sum();
            let a: Array1<f64> = raw_a.iter().map(|v| v / sa).collect();
            let b: Array1<f64> = raw_b.iter().map(|v| v / sb).collect();
            let ab = js_divergence(a.view(), b.view());
            let ba = js_divergence(b.view(), a.view());
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
            prop_assert!(ab <= LN_2 + 1e-12);
        }

        // Coordinates are kept small enough that exp(-c/tau) stays above the
        // f64 underflow threshold; strict positivity is an exact-arithmetic
        // property.
        #[test]
        fn relation_vector_is_a_positive_simplex_point(z in -3.0..3.0f64,
                                                       kps in prop::collection::vec(-3.0..3.0f64, 1..6)) {
            let mut kps = kps;
            kps.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            let k = kps.len();
            let kp = Array2::from_shape_vec((k, 1), kps).unwrap();
            let r = relation_vector(arr1(&[z]).view(), kp.view(), 0.1, CostKind::SquaredL2).unwrap();
            let sum: f64 = r.sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|&v| v > 0.0));
        }
    }
}
