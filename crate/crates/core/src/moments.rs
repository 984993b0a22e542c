//! Moment-condition models, datasets, and sample moment statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GmmError, Result};

pub type MomentFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&[f64], &[f64], &mut DMatrix<f64>) + Send + Sync>;
pub type TargetFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type TargetGradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Central-difference step for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// A vector of `k` moment conditions `g(x, psi)` in a `p`-dimensional
/// parameter, with a scalar target `theta = vartheta(psi)`.
#[derive(Clone)]
pub struct MomentModel {
    name: String,
    k: usize,
    p: usize,
    moments: MomentFn,
    jacobian: Option<JacobianFn>,
    target: Option<TargetFn>,
    target_grad: Option<TargetGradFn>,
    bounds: Option<Vec<(f64, f64)>>,
    offset: Option<DVector<f64>>,
}

impl fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentModel")
            .field("name", &self.name)
            .field("k", &self.k)
            .field("p", &self.p)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .field("bounds", &self.bounds)
            .field("recentered", &self.offset.is_some())
            .finish()
    }
}

impl MomentModel {
    pub fn new(name: impl Into<String>, k: usize, p: usize, moments: MomentFn) -> Result<Self> {
        if p < 1 || k < p {
            return Err(GmmError::Dimension(format!(
                "moment models need k >= p >= 1, got k={k}, p={p}"
            )));
        }
        Ok(Self {
            name: name.into(),
            k,
            p,
            moments,
            jacobian: None,
            target: None,
            target_grad: None,
            bounds: None,
            offset: None,
        })
    }

    pub fn with_jacobian(mut self, jacobian: JacobianFn) -> Self {
        self.jacobian = Some(jacobian);
        self
    }

    /// Replace the default target (first coordinate of psi).
    pub fn with_target(mut self, target: TargetFn, grad: Option<TargetGradFn>) -> Self {
        self.target = Some(target);
        self.target_grad = grad;
        self
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.len() != self.p {
            return Err(GmmError::Dimension(format!(
                "{} bounds for p={}",
                bounds.len(),
                self.p
            )));
        }
        if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi)) {
            return Err(GmmError::Config(format!("empty parameter box [{lo}, {hi}]")));
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    /// Same model with moments `g(x, psi) - offset`. Used by the recentered
    /// bootstrap; the Jacobian is unchanged.
    pub fn recentered(&self, offset: &DVector<f64>) -> Result<Self> {
        if offset.len() != self.k {
            return Err(GmmError::Dimension(format!(
                "offset of length {} for k={}",
                offset.len(),
                self.k
            )));
        }
        let mut out = self.clone();
        out.offset = Some(match &self.offset {
            Some(existing) => existing + offset,
            None => offset.clone(),
        });
        Ok(out)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    #[inline]
    pub fn eval(&self, row: &[f64], psi: &[f64], out: &mut [f64]) {
        (self.moments)(row, psi, out);
        if let Some(off) = &self.offset {
            for (o, c) in out.iter_mut().zip(off.iter()) {
                *o -= c;
            }
        }
    }

    /// Per-observation Jacobian: analytic when supplied, else central differences.
    pub fn jacobian_at(&self, row: &[f64], psi: &[f64], out: &mut DMatrix<f64>) {
        if let Some(jac) = &self.jacobian {
            jac(row, psi, out);
            return;
        }
        self.fd_jacobian_at(row, psi, out);
    }

    /// Central-difference Jacobian of `g(row, .)`, ignoring any analytic Jacobian.
    pub fn fd_jacobian_at(&self, row: &[f64], psi: &[f64], out: &mut DMatrix<f64>) {
        let mut work = psi.to_vec();
        let mut plus = vec![0.0; self.k];
        let mut minus = vec![0.0; self.k];
        for j in 0..self.p {
            let h = fd_step(psi[j]);
            work[j] = psi[j] + h;
            (self.moments)(row, &work, &mut plus);
            work[j] = psi[j] - h;
            (self.moments)(row, &work, &mut minus);
            work[j] = psi[j];
            for i in 0..self.k {
                out[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
    }

    pub fn theta(&self, psi: &[f64]) -> f64 {
        match &self.target {
            Some(t) => t(psi),
            None => psi[0],
        }
    }

    /// Gradient of the target map at `psi`.
    pub fn theta_grad(&self, psi: &[f64]) -> DVector<f64> {
        if let Some(g) = &self.target_grad {
            return DVector::from_vec(g(psi));
        }
        match &self.target {
            None => {
                let mut e = DVector::zeros(self.p);
                e[0] = 1.0;
                e
            }
            Some(t) => {
                let mut work = psi.to_vec();
                DVector::from_fn(self.p, |j, _| {
                    let h = fd_step(psi[j]);
                    work[j] = psi[j] + h;
                    let up = t(&work);
                    work[j] = psi[j] - h;
                    let down = t(&work);
                    work[j] = psi[j];
                    (up - down) / (2.0 * h)
                })
            }
        }
    }

    pub fn check_psi(&self, psi: &[f64]) -> Result<()> {
        if psi.len() != self.p {
            return Err(GmmError::Dimension(format!(
                "parameter of length {} for p={}",
                psi.len(),
                self.p
            )));
        }
        if let Some(b) = &self.bounds {
            for (j, (&x, &(lo, hi))) in psi.iter().zip(b.iter()).enumerate() {
                if !(x >= lo && x <= hi) {
                    return Err(GmmError::InvalidArgument(format!(
                        "psi[{j}] = {x} outside [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `n` observations of width `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<String>,
    values: Vec<f64>,
    n: usize,
}

impl Dataset {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = columns.len();
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(GmmError::Data(format!(
                    "row {i} has width {} but there are {d} columns",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(columns, values)
    }

    pub fn from_flat(columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let d = columns.len();
        if d == 0 {
            return Err(GmmError::Data("dataset has no columns".into()));
        }
        if values.is_empty() || values.len() % d != 0 {
            return Err(GmmError::Data(format!(
                "{} values do not form nonempty rows of width {d}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(GmmError::Data(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                columns[pos % d]
            )));
        }
        let n = values.len() / d;
        Ok(Self { columns, values, n })
    }

    /// Single-column dataset.
    pub fn from_column(name: &str, xs: &[f64]) -> Result<Self> {
        Self::from_flat(vec![name.to_string()], xs.to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Dataset made of the rows at `idx`, in that order (repeats allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let d = self.d();
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            columns: self.columns.clone(),
            values,
            n: idx.len(),
        }
    }
}

/// Sample moment statistics at a parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    /// Sample mean of the moments.
    pub g_bar: DVector<f64>,
    /// Mean Jacobian (k x p).
    pub gamma_hat: DMatrix<f64>,
    /// Centered covariance with divisor n.
    pub sigma_hat: DMatrix<f64>,
}

fn evaluation_error(row: usize, values: &[f64]) -> GmmError {
    GmmError::Evaluation {
        row,
        detail: format!("moment vector {values:?}"),
    }
}

/// Sample mean of the moments.
pub fn sample_moments(model: &MomentModel, data: &Dataset, psi: &[f64]) -> Result<DVector<f64>> {
    let k = model.k();
    let mut buf = vec![0.0; k];
    let mut sum = vec![0.0; k];
    for (i, row) in data.rows().enumerate() {
        model.eval(row, psi, &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(evaluation_error(i, &buf));
        }
        for (s, v) in sum.iter_mut().zip(&buf) {
            *s += v;
        }
    }
    let n = data.n() as f64;
    Ok(DVector::from_iterator(k, sum.into_iter().map(|s| s / n)))
}

/// Column means with one refinement pass, so constant columns give their
/// value exactly.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        m.ncols(),
        m.column_iter().map(|c| crate::linalg::mean(c.as_slice())),
    )
}

/// All per-observation moments as an n x k matrix.
pub fn moment_matrix(model: &MomentModel, data: &Dataset, psi: &[f64]) -> Result<DMatrix<f64>> {
    let k = model.k();
    let mut out = DMatrix::zeros(data.n(), k);
    let mut buf = vec![0.0; k];
    for (i, row) in data.rows().enumerate() {
        model.eval(row, psi, &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(evaluation_error(i, &buf));
        }
        for j in 0..k {
            out[(i, j)] = buf[j];
        }
    }
    Ok(out)
}

/// Mean Jacobian of the moments. Without an analytic Jacobian this is the
/// central difference of the sample mean, which equals the mean of the
/// per-observation central differences.
pub fn mean_jacobian(model: &MomentModel, data: &Dataset, psi: &[f64]) -> Result<DMatrix<f64>> {
    let (k, p) = (model.k(), model.p());
    if model.has_analytic_jacobian() {
        let mut acc = DMatrix::zeros(k, p);
        let mut jac = DMatrix::zeros(k, p);
        for (i, row) in data.rows().enumerate() {
            model.jacobian_at(row, psi, &mut jac);
            if jac.iter().any(|v| !v.is_finite()) {
                return Err(GmmError::Evaluation {
                    row: i,
                    detail: "non-finite Jacobian".into(),
                });
            }
            acc += &jac;
        }
        return Ok(acc / data.n() as f64);
    }
    let mut out = DMatrix::zeros(k, p);
    let mut work = psi.to_vec();
    for j in 0..p {
        let h = fd_step(psi[j]);
        work[j] = psi[j] + h;
        let up = sample_moments(model, data, &work)?;
        work[j] = psi[j] - h;
        let down = sample_moments(model, data, &work)?;
        work[j] = psi[j];
        out.set_column(j, &((up - down) / (2.0 * h)));
    }
    Ok(out)
}

/// Centered covariance `(1/n) sum (g_i - g_bar)(g_i - g_bar)'`.
pub fn centered_covariance(moments: &DMatrix<f64>, g_bar: &DVector<f64>) -> DMatrix<f64> {
    let (n, k) = moments.shape();
    let mut centered = moments.clone();
    for i in 0..n {
        for j in 0..k {
            centered[(i, j)] -= g_bar[j];
        }
    }
    let s = centered.transpose() * &centered / n as f64;
    (&s + s.transpose()) * 0.5
}

pub fn moment_stats(model: &MomentModel, data: &Dataset, psi: &[f64]) -> Result<MomentStats> {
    model.check_psi(psi)?;
    let g = moment_matrix(model, data, psi)?;
    let g_bar = column_means(&g);
    let sigma_hat = centered_covariance(&g, &g_bar);
    let gamma_hat = mean_jacobian(model, data, psi)?;
    Ok(MomentStats {
        g_bar,
        gamma_hat,
        sigma_hat,
    })
}

/// Value of a built-in model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Num(f64),
    Str(String),
    List(Vec<String>),
}

pub type ModelParams = BTreeMap<String, ParamValue>;

pub const BUILTIN_MODELS: &[&str] = &["linear_iv", "mean_square_match"];

fn column_ref(params: &ModelParams, key: &str, columns: &[String]) -> Result<Option<usize>> {
    match params.get(key) {
        None => Ok(None),
        Some(ParamValue::Str(name)) => columns
            .iter()
            .position(|c| c == name)
            .map(Some)
            .ok_or_else(|| GmmError::Config(format!("column `{name}` for `{key}` not in data"))),
        Some(other) => Err(GmmError::Config(format!(
            "`{key}` must be a column name, got {other:?}"
        ))),
    }
}

fn column_list(params: &ModelParams, key: &str, columns: &[String]) -> Result<Vec<usize>> {
    let names = match params.get(key) {
        Some(ParamValue::List(names)) => names.clone(),
        Some(ParamValue::Str(name)) => vec![name.clone()],
        Some(other) => {
            return Err(GmmError::Config(format!(
                "`{key}` must list column names, got {other:?}"
            )))
        }
        None => {
            return Err(GmmError::Config(format!(
                "missing column role `{key}`"
            )))
        }
    };
    if names.is_empty() {
        return Err(GmmError::Config(format!("column role `{key}` is empty")));
    }
    names
        .iter()
        .map(|name| {
            columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| GmmError::Config(format!("column `{name}` for `{key}` not in data")))
        })
        .collect()
}

/// Look up a built-in demo model. Column roles in `params` are resolved
/// against `columns`.
///
/// * `linear_iv` with roles `y` (name), `w` and `z` (name lists):
///   `g(x, psi) = z (y - w' psi)`, k = |z|, p = |w|.
/// * `mean_square_match` with optional role `x` (default: first column):
///   `g(x, psi) = (x - psi, x^2 - psi^2)`, k = 2, p = 1.
pub fn builtin_model(name: &str, params: &ModelParams, columns: &[String]) -> Result<MomentModel> {
    match name {
        "linear_iv" => {
            let y = column_ref(params, "y", columns)?
                .ok_or_else(|| GmmError::Config("missing column role `y`".into()))?;
            let w = column_list(params, "w", columns)?;
            let z = column_list(params, "z", columns)?;
            linear_iv(y, w, z)
        }
        "mean_square_match" => {
            let x = column_ref(params, "x", columns)?.unwrap_or(0);
            Ok(mean_square_match(x))
        }
        other => Err(GmmError::UnknownModel {
            name: other.to_string(),
            valid: BUILTIN_MODELS.join(", "),
        }),
    }
}

/// Linear instrumental-variables moments `z (y - w' psi)` by column index.
pub fn linear_iv(y: usize, w: Vec<usize>, z: Vec<usize>) -> Result<MomentModel> {
    let (k, p) = (z.len(), w.len());
    let (wm, zm) = (w.clone(), z.clone());
    let moments: MomentFn = Arc::new(move |row, psi, out| {
        let mut resid = row[y];
        for (&c, &b) in wm.iter().zip(psi) {
            resid -= row[c] * b;
        }
        for (o, &c) in out.iter_mut().zip(&zm) {
            *o = row[c] * resid;
        }
    });
    let jacobian: JacobianFn = Arc::new(move |row, _psi, out| {
        for (i, &zc) in z.iter().enumerate() {
            for (j, &wc) in w.iter().enumerate() {
                out[(i, j)] = -row[zc] * row[wc];
            }
        }
    });
    Ok(MomentModel::new("linear_iv", k, p, moments)?.with_jacobian(jacobian))
}

/// First and second moment matching `(x - psi, x^2 - psi^2)` on column `x`.
pub fn mean_square_match(x: usize) -> MomentModel {
    let moments: MomentFn = Arc::new(move |row, psi, out| {
        let v = row[x];
        out[0] = v - psi[0];
        out[1] = v * v - psi[0] * psi[0];
    });
    let jacobian: JacobianFn = Arc::new(|_row, psi, out| {
        out[(0, 0)] = -1.0;
        out[(1, 0)] = -2.0 * psi[0];
    });
    MomentModel::new("mean_square_match", 2, 1, moments)
        .expect("k=2, p=1")
        .with_jacobian(jacobian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle_mean(rows: &[f64], psi: f64) -> [f64; 2] {
        let n = rows.len() as f64;
        let mut s = [0.0, 0.0];
        for &x in rows {
            s[0] += x - psi;
            s[1] += x * x - psi * psi;
        }
        [s[0] / n, s[1] / n]
    }

    #[test]
    fn mean_square_match_stats_on_three_points() {
        let data = Dataset::from_column("x", &[1.0, 2.0, 3.0]).unwrap();
        let model = mean_square_match(0);
        let stats = moment_stats(&model, &data, &[2.0]).unwrap();
        let oracle = oracle_mean(&[1.0, 2.0, 3.0], 2.0);
        assert!((stats.g_bar[0] - 0.0).abs() < 1e-15);
        assert!((stats.g_bar[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((stats.g_bar[0] - oracle[0]).abs() < 1e-15);
        assert!((stats.g_bar[1] - oracle[1]).abs() < 1e-15);
        assert_eq!(stats.gamma_hat[(0, 0)], -1.0);
        assert_eq!(stats.gamma_hat[(1, 0)], -4.0);

        // direct centered covariance over the three rows
        let rows: Vec<[f64; 2]> = [1.0, 2.0, 3.0].iter().map(|&x| [x - 2.0, x * x - 4.0]).collect();
        let mut cov = [[0.0; 2]; 2];
        for r in &rows {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += (r[a] - oracle[a]) * (r[b] - oracle[b]) / 3.0;
                }
            }
        }
        assert!((cov[0][0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((cov[0][1] - 8.0 / 3.0).abs() < 1e-14);
        assert!((cov[1][1] - 98.0 / 9.0).abs() < 1e-14);
        for a in 0..2 {
            for b in 0..2 {
                assert!((stats.sigma_hat[(a, b)] - cov[a][b]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn identical_rows_give_zero_covariance() {
        let data = Dataset::from_column("x", &[1.7; 25]).unwrap();
        let stats = moment_stats(&mean_square_match(0), &data, &[0.3]).unwrap();
        assert_eq!(stats.sigma_hat, DMatrix::zeros(2, 2));
    }

    #[test]
    fn registry_dimensions_and_errors() {
        let cols: Vec<String> = ["y", "w1", "z1", "z2", "z3"].iter().map(|s| s.to_string()).collect();
        let m = builtin_model("mean_square_match", &ModelParams::new(), &cols).unwrap();
        assert_eq!((m.k(), m.p()), (2, 1));

        let mut params = ModelParams::new();
        params.insert("y".into(), ParamValue::Str("y".into()));
        params.insert("w".into(), ParamValue::List(vec!["w1".into()]));
        params.insert(
            "z".into(),
            ParamValue::List(vec!["z1".into(), "z2".into(), "z3".into()]),
        );
        let iv = builtin_model("linear_iv", &params, &cols).unwrap();
        assert_eq!((iv.k(), iv.p()), (3, 1));

        let err = builtin_model("nonexistent", &ModelParams::new(), &cols).unwrap_err();
        match err {
            GmmError::UnknownModel { valid, .. } => {
                assert!(valid.contains("linear_iv") && valid.contains("mean_square_match"))
            }
            other => panic!("unexpected {other:?}"),
        }

        params.remove("z");
        assert!(matches!(
            builtin_model("linear_iv", &params, &cols),
            Err(GmmError::Config(_))
        ));
    }

    #[test]
    fn non_finite_moment_names_row() {
        let model = MomentModel::new(
            "log",
            1,
            1,
            Arc::new(|row: &[f64], psi: &[f64], out: &mut [f64]| out[0] = row[0].ln() - psi[0]),
        )
        .unwrap();
        let data = Dataset::from_column("x", &[1.0, 2.0, 0.0, 3.0]).unwrap();
        match moment_stats(&model, &data, &[0.0]) {
            Err(GmmError::Evaluation { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_rejects_bad_input() {
        assert!(Dataset::from_flat(vec!["a".into()], vec![]).is_err());
        assert!(Dataset::from_flat(vec!["a".into()], vec![1.0, f64::NAN]).is_err());
        assert!(Dataset::new(vec!["a".into(), "b".into()], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn bounds_are_enforced() {
        let model = mean_square_match(0).with_bounds(vec![(0.0, 1.0)]).unwrap();
        let data = Dataset::from_column("x", &[0.5]).unwrap();
        assert!(moment_stats(&model, &data, &[2.0]).is_err());
        assert!(mean_square_match(0).with_bounds(vec![(1.0, 1.0)]).is_err());
    }

    #[test]
    fn recentering_zeroes_moments_at_reference_point() {
        let data = Dataset::from_column("x", &[0.3, 1.1, 2.9, -0.4]).unwrap();
        let model = mean_square_match(0);
        let g = sample_moments(&model, &data, &[0.8]).unwrap();
        let centered = model.recentered(&g).unwrap();
        let g0 = sample_moments(&centered, &data, &[0.8]).unwrap();
        assert!(g0.amax() < 1e-15);
    }

    fn iv_rows(seed: u64, n: usize) -> Dataset {
        use crate::rng::{standard_normal, sub_rng};
        let mut rng = sub_rng(seed, 0);
        let mut rows = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..5).map(|_| standard_normal(&mut rng)).collect();
            rows.push(row);
        }
        let cols = ["y", "w1", "w2", "z1", "z2"].iter().map(|s| s.to_string()).collect();
        Dataset::new(cols, rows).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn fd_jacobian_matches_analytic_on_linear_iv(seed in 0u64..10_000, a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let data = iv_rows(seed, 20);
            let model = linear_iv(0, vec![1, 2], vec![3, 4, 1]).unwrap();
            let psi = [a, b];
            let analytic = mean_jacobian(&model, &data, &psi).unwrap();
            let mut fd = DMatrix::zeros(3, 2);
            let mut acc = DMatrix::zeros(3, 2);
            for row in data.rows() {
                model.fd_jacobian_at(row, &psi, &mut fd);
                acc += &fd;
            }
            acc /= data.n() as f64;
            let scale = analytic.amax().max(1e-12);
            prop_assert!((acc - &analytic).amax() / scale < 1e-6);
        }

        #[test]
        fn covariance_invariant_to_row_order(seed in 0u64..10_000, psi in -3.0f64..3.0) {
            let data = iv_rows(seed, 15);
            let model = linear_iv(0, vec![1], vec![3, 4, 2]).unwrap();
            let mut idx: Vec<usize> = (0..data.n()).collect();
            idx.reverse();
            idx.swap(0, 7);
            let shuffled = data.select_rows(&idx);
            let a = moment_stats(&model, &data, &[psi]).unwrap();
            let b = moment_stats(&model, &shuffled, &[psi]).unwrap();
            prop_assert!((a.sigma_hat - b.sigma_hat).amax() < 1e-12);
        }

        #[test]
        fn g_bar_is_linear_in_moments(seed in 0u64..10_000, c in -4.0f64..4.0) {
            let data = iv_rows(seed, 12);
            let base = linear_iv(0, vec![1], vec![3, 4]).unwrap();
            let inner = base.clone();
            let scaled = MomentModel::new("scaled", 2, 1, Arc::new(move |row: &[f64], psi: &[f64], out: &mut [f64]| {
                inner.eval(row, psi, out);
                for v in out.iter_mut() { *v *= c; }
            })).unwrap();
            let a = sample_moments(&base, &data, &[0.7]).unwrap() * c;
            let b = sample_moments(&scaled, &data, &[0.7]).unwrap();
            prop_assert!((a - b).amax() < 1e-12);
        }

        #[test]
        fn linear_iv_jacobian_constant_in_psi(seed in 0u64..10_000, p1 in -9.0f64..9.0, p2 in -9.0f64..9.0) {
            let data = iv_rows(seed, 10);
            let model = linear_iv(0, vec![1], vec![3, 4]).unwrap();
            let a = moment_stats(&model, &data, &[p1]).unwrap().gamma_hat;
            let b = moment_stats(&model, &data, &[p2]).unwrap().gamma_hat;
            prop_assert_eq!(a, b);
        }
    }
}
