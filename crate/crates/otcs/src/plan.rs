//! Discrete transport plans on empirical supports, shared by the exact
//! solver and the dual-trained reconstruction.

use ndarray::{Array1, Array2, Axis};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ot::EmpiricalMeasure;

/// A coupling matrix between two empirical measures, together with the
/// marginals it is supposed to match.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanMatrix {
    pub entries: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

impl PlanMatrix {
    pub fn new(entries: Array2<f64>, row_marginal: Array1<f64>, col_marginal: Array1<f64>) -> Self {
        assert_eq!(entries.nrows(), row_marginal.len());
        assert_eq!(entries.ncols(), col_marginal.len());
        PlanMatrix { entries, row_marginal, col_marginal }
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.entries.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.entries.sum_axis(Axis(0))
    }

    /// L1 violations of the two marginal constraints.
    pub fn marginal_violations(&self) -> (f64, f64) {
        let row = (&self.row_sums() - &self.row_marginal).mapv(f64::abs).sum();
        let col = (&self.col_sums() - &self.col_marginal).mapv(f64::abs).sum();
        (row, col)
    }

    /// Entrywise L1 distance to another plan on the same support.
    pub fn l1_distance(&self, other: &PlanMatrix) -> f64 {
        (&self.entries - &other.entries).mapv(f64::abs).sum()
    }

    /// Row `i` normalized to a probability vector over the targets.
    pub fn conditional_row(&self, i: usize) -> Result<Array1<f64>> {
        let row = self.entries.row(i);
        let total = row.sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass(format!("plan row {i}")));
        }
        Ok(row.mapv(|v| v / total))
    }

    /// Mean of the conditional row in target space.
    pub fn barycentric_map(&self, q: &EmpiricalMeasure, i: usize) -> Result<Array1<f64>> {
        let cond = self.conditional_row(i)?;
        let mut out = Array1::zeros(q.dim());
        for (w, y) in cond.iter().zip(q.coords_view().axis_iter(Axis(0))) {
            out.scaled_add(*w, &y);
        }
        Ok(out)
    }

    /// Dense `i,j,value` triples.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "i,j,value")?;
        for ((i, j), v) in self.entries.indexed_iter() {
            writeln!(file, "{i},{j},{v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn uniform2() -> (Array1<f64>, Array1<f64>) {
        (arr1(&[0.5, 0.5]), arr1(&[0.5, 0.5]))
    }

    #[test]
    fn conditional_of_independent_plan_is_q() {
        let (p, q) = uniform2();
        let entries = arr2(&[[0.25, 0.25], [0.25, 0.25]]);
        let plan = PlanMatrix::new(entries, p, q.clone());
        for i in 0..2 {
            let cond = plan.conditional_row(i).unwrap();
            assert!((cond[0] - q[0]).abs() < 1e-12);
            assert!((cond[1] - q[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_plan_has_one_hot_conditionals() {
        let (p, q) = uniform2();
        let plan = PlanMatrix::new(arr2(&[[0.5, 0.0], [0.0, 0.5]]), p, q);
        assert_eq!(plan.conditional_row(0).unwrap(), arr1(&[1.0, 0.0]));
        assert_eq!(plan.conditional_row(1).unwrap(), arr1(&[0.0, 1.0]));
    }

    #[test]
    fn zero_row_is_an_error() {
        let (p, q) = uniform2();
        let plan = PlanMatrix::new(arr2(&[[0.0, 0.0], [0.5, 0.5]]), p, q);
        assert!(matches!(plan.conditional_row(0), Err(Error::ZeroMass(_))));
    }

    #[test]
    fn barycenter_examples() {
        let (p, q) = uniform2();
        let measure = EmpiricalMeasure::uniform(arr2(&[[0.0], [2.0]])).unwrap();
        // one-hot conditional lands exactly on the target point
        let plan = PlanMatrix::new(arr2(&[[0.0, 0.5], [0.5, 0.0]]), p.clone(), q.clone());
        assert_eq!(plan.barycentric_map(&measure, 0).unwrap(), arr1(&[2.0]));
        // uniform conditional over {0, 2} lands at the midpoint
        let plan = PlanMatrix::new(arr2(&[[0.25, 0.25], [0.25, 0.25]]), p, q);
        assert_eq!(plan.barycentric_map(&measure, 0).unwrap(), arr1(&[1.0]));
    }
}
