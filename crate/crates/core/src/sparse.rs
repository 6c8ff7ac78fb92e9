//! Sparse shape refinement of predicted centroid coordinates.
//!
//! Three steps, run jointly over the whole chain:
//!
//! 1. a dynamic program picks the longest strictly descending subsequence of
//!    the predicted z coordinates — entries violating the anatomical z order
//!    are treated as outliers and excluded;
//! 2. per axis, a LASSO (cyclic coordinate descent with soft thresholding)
//!    expresses the surviving coordinates as a sparse combination of shape
//!    dictionary columns, using the same subspace for x, y, and z;
//! 3. every coordinate — kept, outlier, or absent — is reconstructed from
//!    the fitted combination.

use thiserror::Error;

use crate::landmarks::{Landmark, LandmarkSet};
use crate::par;

/// Coefficients below this magnitude count as zero in the reported support.
pub const SUPPORT_EPS: f64 = 1e-12;

/// Two z coordinates closer than this are not considered descending.
pub const DESCENT_TOL_MM: f64 = 1e-9;

/// Errors from dictionary construction and refinement.
#[derive(Debug, Error)]
pub enum SparseError {
    #[error("coordinate descent did not converge in {sweeps} sweeps (KKT residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },
    #[error("invalid dictionary: {0}")]
    BadDictionary(String),
    #[error("prediction does not align with dictionary: {0}")]
    LabelMismatch(String),
    #[error("invalid lambda {0}")]
    BadLambda(f64),
}

/// Dense column-major matrix of coordinates: one row per landmark, one
/// column per dictionary atom.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CoordMatrix {
    pub fn zeros(rows: usize, cols: usize) -> CoordMatrix {
        CoordMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<CoordMatrix, SparseError> {
        let mut m = CoordMatrix::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(SparseError::BadDictionary(format!(
                    "column {j} has {} entries, expected {rows}",
                    col.len()
                )));
            }
            m.data[j * rows..(j + 1) * rows].copy_from_slice(col);
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[c * self.rows + r]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[c * self.rows + r] = v;
    }

    /// New matrix keeping only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> CoordMatrix {
        let mut out = CoordMatrix::zeros(rows.len(), self.cols);
        for (r_new, &r_old) in rows.iter().enumerate() {
            for c in 0..self.cols {
                out.set(r_new, c, self.at(r_old, c));
            }
        }
        out
    }

    /// `D a` as a dense vector.
    pub fn mul_vec(&self, a: &[f64]) -> Vec<f64> {
        debug_assert_eq!(a.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for (j, &coef) in a.iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            for (o, d) in out.iter_mut().zip(self.col(j)) {
                *o += coef * d;
            }
        }
        out
    }
}

/// Index set of the longest strictly decreasing subsequence of `v`, by
/// O(M^2) dynamic programming. Among equal-length answers the
/// lexicographically smallest index set wins. Decrease means dropping by
/// more than [`DESCENT_TOL_MM`].
pub fn max_descending_subsequence(v: &[f64]) -> Vec<usize> {
    let m = v.len();
    if m == 0 {
        return Vec::new();
    }
    // f[i] = length of the longest strictly decreasing run starting at i.
    let mut f = vec![1usize; m];
    for i in (0..m).rev() {
        for j in i + 1..m {
            if v[i] - v[j] > DESCENT_TOL_MM && f[j] + 1 > f[i] {
                f[i] = f[j] + 1;
            }
        }
    }
    let best = *f.iter().max().expect("nonempty");
    // Greedy left-to-right reconstruction: taking the earliest index that
    // still completes a run of the required length yields the
    // lexicographically smallest index set.
    let mut out = Vec::with_capacity(best);
    let mut need = best;
    let mut prev: Option<usize> = None;
    for i in 0..m {
        if f[i] != need {
            continue;
        }
        if let Some(p) = prev {
            if !(v[p] - v[i] > DESCENT_TOL_MM) {
                continue;
            }
        }
        out.push(i);
        prev = Some(i);
        need -= 1;
        if need == 0 {
            break;
        }
    }
    out
}

/// A LASSO solution: coefficients over dictionary columns and the penalty
/// that produced them.
#[derive(Debug, Clone)]
pub struct SparseCode {
    pub coeffs: Vec<f64>,
    pub lambda: f64,
}

impl SparseCode {
    /// Indices with |a_k| above [`SUPPORT_EPS`].
    pub fn support(&self) -> Vec<usize> {
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(_, a)| a.abs() > SUPPORT_EPS)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Coordinate-descent stopping rule.
#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    /// KKT residual below which the solve counts as converged.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> LassoOptions {
        LassoOptions {
            tol: 1e-8,
            max_sweeps: 10_000,
        }
    }
}

/// `1/2 ||v - D a||^2 + sum_k lambda_k |a_k|`.
pub fn lasso_objective(d: &CoordMatrix, v: &[f64], lambdas: &[f64], a: &[f64]) -> f64 {
    let fit = d.mul_vec(a);
    let sq: f64 = v.iter().zip(&fit).map(|(x, y)| (x - y) * (x - y)).sum();
    let pen: f64 = a.iter().zip(lambdas).map(|(ak, lk)| lk * ak.abs()).sum();
    0.5 * sq + pen
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Worst KKT violation of `a` for the (per-coordinate-penalty) LASSO.
fn kkt_residual(d: &CoordMatrix, residual: &[f64], lambdas: &[f64], a: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..d.cols() {
        let g: f64 = d.col(k).iter().zip(residual).map(|(x, r)| x * r).sum();
        let viol = if a[k].abs() <= SUPPORT_EPS {
            (g.abs() - lambdas[k]).max(0.0)
        } else {
            (g - lambdas[k] * a[k].signum()).abs()
        };
        worst = worst.max(viol);
    }
    worst
}

/// `min_a 1/2 ||v - D a||^2 + lambda ||a||_1`, by cyclic coordinate descent
/// with exact soft-threshold updates.
///
/// Converges when the KKT residual drops to `opts.tol`; a solve that is
/// still violating after `opts.max_sweeps` sweeps is an error carrying the
/// final residual.
pub fn lasso_solve(
    d: &CoordMatrix,
    v: &[f64],
    lambda: f64,
    opts: &LassoOptions,
) -> Result<SparseCode, SparseError> {
    assert_eq!(v.len(), d.rows(), "target length vs dictionary rows");
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(SparseError::BadLambda(lambda));
    }
    let lambdas = vec![lambda; d.cols()];
    let norms: Vec<f64> = (0..d.cols())
        .map(|k| d.col(k).iter().map(|x| x * x).sum())
        .collect();
    let mut a = vec![0.0f64; d.cols()];
    let mut residual = v.to_vec();
    let mut last = f64::INFINITY;
    for _ in 0..opts.max_sweeps {
        for k in 0..d.cols() {
            if norms[k] == 0.0 {
                continue; // zero column: any coefficient is equivalent; keep 0
            }
            let col = d.col(k);
            let g: f64 = col.iter().zip(&residual).map(|(x, r)| x * r).sum();
            let rho = g + norms[k] * a[k];
            let new = soft_threshold(rho, lambda) / norms[k];
            let delta = a[k] - new;
            if delta != 0.0 {
                for (r, x) in residual.iter_mut().zip(col) {
                    *r += delta * x;
                }
                a[k] = new;
            }
        }
        last = kkt_residual(d, &residual, &lambdas, &a);
        if last <= opts.tol {
            // Snap near-zero coefficients so support reporting is stable.
            for ak in &mut a {
                if ak.abs() <= SUPPORT_EPS {
                    *ak = 0.0;
                }
            }
            return Ok(SparseCode { coeffs: a, lambda });
        }
    }
    Err(SparseError::NonConvergence {
        sweeps: opts.max_sweeps,
        residual: last,
    })
}

/// Per-axis coordinate dictionaries sharing one row per landmark label and
/// one column per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDictionary {
    labels: Vec<String>,
    x: CoordMatrix,
    y: CoordMatrix,
    z: CoordMatrix,
}

impl ShapeDictionary {
    pub fn new(
        labels: Vec<String>,
        x: CoordMatrix,
        y: CoordMatrix,
        z: CoordMatrix,
    ) -> Result<ShapeDictionary, SparseError> {
        let dims = (x.rows(), x.cols());
        if (y.rows(), y.cols()) != dims || (z.rows(), z.cols()) != dims {
            return Err(SparseError::BadDictionary(
                "axis matrices must share dims".to_string(),
            ));
        }
        if labels.len() != dims.0 {
            return Err(SparseError::BadDictionary(format!(
                "{} labels for {} rows",
                labels.len(),
                dims.0
            )));
        }
        if dims.0 == 0 || dims.1 == 0 {
            return Err(SparseError::BadDictionary("empty dictionary".to_string()));
        }
        for m in [&x, &y, &z] {
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(SparseError::BadDictionary(
                    "non-finite coordinate".to_string(),
                ));
            }
        }
        Ok(ShapeDictionary { labels, x, y, z })
    }

    /// Builds the dictionary from training landmark sets: one column per set
    /// with every chain label present. Sets missing any label are skipped.
    pub fn from_training(
        labels: &[String],
        train: &[LandmarkSet],
    ) -> Result<ShapeDictionary, SparseError> {
        let mut cols_x = Vec::new();
        let mut cols_y = Vec::new();
        let mut cols_z = Vec::new();
        let mut skipped = 0usize;
        for set in train {
            let marks: Option<Vec<&Landmark>> = labels
                .iter()
                .map(|l| set.get(l).filter(|m| m.present))
                .collect();
            match marks {
                Some(marks) => {
                    cols_x.push(marks.iter().map(|m| m.position_mm[0]).collect());
                    cols_y.push(marks.iter().map(|m| m.position_mm[1]).collect());
                    cols_z.push(marks.iter().map(|m| m.position_mm[2]).collect());
                }
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            log::warn!("dictionary: skipped {skipped} training sample(s) with absent labels");
        }
        if cols_x.is_empty() {
            return Err(SparseError::BadDictionary(
                "no training sample has every label present".to_string(),
            ));
        }
        let rows = labels.len();
        ShapeDictionary::new(
            labels.to_vec(),
            CoordMatrix::from_columns(rows, &cols_x)?,
            CoordMatrix::from_columns(rows, &cols_y)?,
            CoordMatrix::from_columns(rows, &cols_z)?,
        )
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Number of landmark rows.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of training-sample columns.
    pub fn atoms(&self) -> usize {
        self.x.cols()
    }

    pub fn axis(&self, axis: usize) -> &CoordMatrix {
        match axis {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

/// Whether predicted z coordinates descend or ascend along the chain; the
/// DP always looks for a descent, so ascending data is negated first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZOrientation {
    Descending,
    Ascending,
}

/// Refinement settings.
#[derive(Debug, Clone)]
pub struct RefineOptions {
    /// Explicit penalty; `None` uses `0.1 * ||D_zS' v_zS||_inf` computed on
    /// the z-axis system actually passed to the solver (centered when the
    /// constant column is on).
    pub lambda: Option<f64>,
    /// Append an unpenalized all-ones column to absorb global translation.
    pub constant_column: bool,
    pub orientation: ZOrientation,
    pub lasso: LassoOptions,
}

impl Default for RefineOptions {
    fn default() -> RefineOptions {
        RefineOptions {
            lambda: None,
            constant_column: true,
            orientation: ZOrientation::Descending,
            lasso: LassoOptions::default(),
        }
    }
}

/// What [`refine`] did and produced.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub landmarks: LandmarkSet,
    /// True when fewer than 2 landmarks were present: input passed through.
    pub skipped: bool,
    /// Dictionary row indices kept by the descending-subsequence filter.
    pub subspace: Vec<usize>,
    /// Labels reconstructed without a present prediction.
    pub extrapolated: Vec<String>,
    /// Effective penalty used by the per-axis solves.
    pub lambda: f64,
}

/// Refines predicted centroids against a shape dictionary.
///
/// The prediction must contain every dictionary label. Absent landmarks are
/// excluded before the z filter; their coordinates are still reconstructed
/// (and reported in `extrapolated`). Presence flags survive unchanged.
pub fn refine(
    pred: &LandmarkSet,
    dict: &ShapeDictionary,
    opts: &RefineOptions,
) -> Result<RefineOutcome, SparseError> {
    let m = dict.len();
    let mut marks = Vec::with_capacity(m);
    for label in dict.labels() {
        match pred.get(label) {
            Some(mark) => marks.push(mark.clone()),
            None => {
                return Err(SparseError::LabelMismatch(format!(
                    "prediction is missing {label:?}"
                )))
            }
        }
    }

    let present: Vec<usize> = (0..m).filter(|&i| marks[i].present).collect();
    if present.len() < 2 {
        return Ok(RefineOutcome {
            landmarks: pred.clone(),
            skipped: true,
            subspace: Vec::new(),
            extrapolated: Vec::new(),
            lambda: 0.0,
        });
    }

    // Step 1: longest strictly descending z run over present landmarks.
    let sign = match opts.orientation {
        ZOrientation::Descending => 1.0,
        ZOrientation::Ascending => -1.0,
    };
    let vz: Vec<f64> = present
        .iter()
        .map(|&i| sign * marks[i].position_mm[2])
        .collect();
    let keep = max_descending_subsequence(&vz);
    let subspace: Vec<usize> = keep.iter().map(|&k| present[k]).collect();

    // Step 2: per-axis LASSO over the surviving rows, shared subspace. With
    // the constant column enabled, atoms and target are centered over the
    // subspace rows so the (unpenalized, implicit) intercept is orthogonal
    // to every atom — coordinate descent would otherwise stall trading mass
    // with an atom collinear to it. The intercept is recovered in closed
    // form afterwards; the atom coefficients are unchanged by the
    // reparameterization.
    let atoms = dict.atoms();
    let n = subspace.len();
    let build = |axis: usize| -> (CoordMatrix, Vec<f64>, Vec<f64>, f64) {
        let sub = dict.axis(axis).select_rows(&subspace);
        let v: Vec<f64> = subspace
            .iter()
            .map(|&i| marks[i].position_mm[axis])
            .collect();
        if !opts.constant_column {
            return (sub, v, vec![0.0; atoms], 0.0);
        }
        let mut d = CoordMatrix::zeros(n, atoms);
        let mut means = Vec::with_capacity(atoms);
        for c in 0..atoms {
            let col = sub.col(c);
            let mean = col.iter().sum::<f64>() / n as f64;
            for (r, x) in col.iter().enumerate() {
                d.set(r, c, x - mean);
            }
            means.push(mean);
        }
        let v_mean = v.iter().sum::<f64>() / n as f64;
        let centered = v.iter().map(|x| x - v_mean).collect();
        (d, centered, means, v_mean)
    };

    let lambda = match opts.lambda {
        Some(l) if l.is_finite() && l >= 0.0 => l,
        Some(l) => return Err(SparseError::BadLambda(l)),
        None => {
            let (dz, vz, _, _) = build(2);
            let mut corr = 0.0f64;
            for k in 0..atoms {
                let g: f64 = dz.col(k).iter().zip(&vz).map(|(x, y)| x * y).sum();
                corr = corr.max(g.abs());
            }
            0.1 * corr
        }
    };

    let solves = par::map_indexed(3, |axis| {
        let (d, v, means, v_mean) = build(axis);
        lasso_solve(&d, &v, lambda, &opts.lasso).map(|code| {
            let shift: f64 = means.iter().zip(&code.coeffs).map(|(m, a)| m * a).sum();
            (code, v_mean - shift)
        })
    });
    let mut codes = Vec::with_capacity(3);
    for s in solves {
        codes.push(s?);
    }

    // Step 3: reconstruct every row from the shared codes.
    let mut refined = Vec::with_capacity(m);
    let mut extrapolated = Vec::new();
    for (i, mark) in marks.iter().enumerate() {
        let mut pos = [0.0f64; 3];
        for (axis, (code, intercept)) in codes.iter().enumerate() {
            let d = dict.axis(axis);
            let mut acc = *intercept;
            for k in 0..atoms {
                acc += d.at(i, k) * code.coeffs[k];
            }
            pos[axis] = acc;
        }
        if !mark.present {
            extrapolated.push(mark.label.clone());
        }
        refined.push(Landmark {
            label: mark.label.clone(),
            position_mm: pos,
            present: mark.present,
        });
    }
    let landmarks = LandmarkSet::new(refined)
        .map_err(|e| SparseError::BadDictionary(format!("refined set invalid: {e}")))?;
    Ok(RefineOutcome {
        landmarks,
        skipped: false,
        subspace,
        extrapolated,
        lambda,
    })
}
