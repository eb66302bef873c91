//! Time-series containers, standardization, and sliding-window views.
//!
//! Conventions used across the crate: a series is a T×d matrix with time on
//! rows; a [`Window`] of length K is identified by the index `t` of its last
//! row, so it covers rows `t−K+1 ..= t` of the parent series. A window's
//! label is the label of its last step.

use crate::error::{Error, Result};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

/// A T×d series of observations with optional anomaly labels and dimension
/// names. Immutable after construction.
#[derive(Clone, Debug)]
pub struct MultivariateSeries {
    values: Array2<f64>,
    labels: Option<Vec<bool>>,
    dim_names: Option<Vec<String>>,
}

impl MultivariateSeries {
    /// Validates that the matrix is nonempty and every entry finite.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::EmptyInput { needed: 1, got: 0 });
        }
        if values.ncols() == 0 {
            return Err(Error::Parameter("series must have at least one dimension".into()));
        }
        if let Some((idx, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, v)| (i, *v))
        {
            let (t, j) = (idx / values.ncols(), idx % values.ncols());
            return Err(Error::Parameter(format!(
                "non-finite value {v} at step {t}, dimension {j}"
            )));
        }
        Ok(MultivariateSeries { values, labels: None, dim_names: None })
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: labels.len() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_dim_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: names.len() });
        }
        self.dim_names = Some(names);
        Ok(self)
    }

    /// Number of time steps T.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of dimensions d.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn dim_names(&self) -> Option<&[String]> {
        self.dim_names.as_deref()
    }

    pub fn label_at(&self, t: usize) -> bool {
        self.labels.as_ref().map(|l| l[t]).unwrap_or(false)
    }

    /// Rows `[start, end)` as a new series, carrying labels and names.
    pub fn slice_steps(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Parameter(format!(
                "invalid step range {start}..{end} for series of length {}",
                self.len()
            )));
        }
        let values = self.values.slice(s![start..end, ..]).to_owned();
        Ok(MultivariateSeries {
            values,
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            dim_names: self.dim_names.clone(),
        })
    }

    /// Splits into `[0, t)` and `[t, T)`.
    pub fn split_at(&self, t: usize) -> Result<(Self, Self)> {
        Ok((self.slice_steps(0, t)?, self.slice_steps(t, self.len())?))
    }
}

/// K consecutive rows of a series, addressed by the index of the last row.
#[derive(Clone, Debug)]
pub struct Window {
    values: Array2<f64>,
    end_index: usize,
}

impl Window {
    pub fn new(values: Array2<f64>, end_index: usize) -> Result<Self> {
        let k = values.nrows();
        if k < 2 {
            return Err(Error::Parameter(format!(
                "window length must be at least 2, got {k}"
            )));
        }
        if end_index + 1 < k {
            return Err(Error::InsufficientHistory { t: end_index, k });
        }
        Ok(Window { values, end_index })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Index of the last row in the parent series.
    pub fn end_index(&self) -> usize {
        self.end_index
    }

    /// Row for series step `t`, which must lie inside the window.
    pub fn row(&self, t: usize) -> ndarray::ArrayView1<'_, f64> {
        let k = self.len();
        assert!(t + k > self.end_index && t <= self.end_index, "step {t} outside window");
        self.values.row(k - 1 - (self.end_index - t))
    }
}

/// Per-dimension mean and standard deviation (population form).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    /// Stats that make standardization the identity map.
    pub fn identity(d: usize) -> Self {
        StandardizationStats { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// All length-K windows of `series`, ordered by end index.
pub fn sliding_windows(series: &MultivariateSeries, k: usize) -> Result<Vec<Window>> {
    if k < 2 {
        return Err(Error::Parameter(format!("window length must be at least 2, got {k}")));
    }
    let t = series.len();
    if t < k {
        return Err(Error::EmptyInput { needed: k, got: t });
    }
    (0..=t - k)
        .map(|start| Window::new(series.values().slice(s![start..start + k, ..]).to_owned(), start + k - 1))
        .collect()
}

/// The single window ending at step `t`.
pub fn window_at(series: &MultivariateSeries, t: usize, k: usize) -> Result<Window> {
    if t + 1 < k {
        return Err(Error::InsufficientHistory { t, k });
    }
    if t >= series.len() {
        return Err(Error::Parameter(format!(
            "step {t} outside series of length {}",
            series.len()
        )));
    }
    Window::new(series.values().slice(s![t + 1 - k..=t, ..]).to_owned(), t)
}

/// Per-dimension mean and population standard deviation over all steps.
pub fn fit_standardizer(series: &MultivariateSeries) -> Result<StandardizationStats> {
    let t = series.len();
    if t < 2 {
        return Err(Error::EmptyInput { needed: 2, got: t });
    }
    let d = series.dim();
    let x = series.values();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for j in 0..d {
        let col = x.column(j);
        let m = col.sum() / t as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
        if var <= 0.0 {
            let name = series
                .dim_names()
                .map(|n| n[j].clone())
                .unwrap_or_else(|| format!("dim{j}"));
            return Err(Error::DegenerateDimension { index: j, name });
        }
        mean[j] = m;
        std[j] = var.sqrt();
    }
    Ok(StandardizationStats { mean, std })
}

/// (x − mean) / std per dimension; labels and names pass through.
pub fn apply_standardizer(
    series: &MultivariateSeries,
    stats: &StandardizationStats,
) -> Result<MultivariateSeries> {
    if stats.dim() != series.dim() {
        return Err(Error::DimensionMismatch { expected: series.dim(), got: stats.dim() });
    }
    let mut values = series.values().clone();
    for j in 0..series.dim() {
        let (m, s) = (stats.mean[j], stats.std[j]);
        values.column_mut(j).mapv_inplace(|v| (v - m) / s);
    }
    Ok(MultivariateSeries {
        values,
        labels: series.labels().map(|l| l.to_vec()),
        dim_names: series.dim_names().map(|n| n.to_vec()),
    })
}

/// x · std + mean per dimension; inverse of [`apply_standardizer`].
pub fn invert_standardizer(
    series: &MultivariateSeries,
    stats: &StandardizationStats,
) -> Result<MultivariateSeries> {
    if stats.dim() != series.dim() {
        return Err(Error::DimensionMismatch { expected: series.dim(), got: stats.dim() });
    }
    let mut values = series.values().clone();
    for j in 0..series.dim() {
        let (m, s) = (stats.mean[j], stats.std[j]);
        values.column_mut(j).mapv_inplace(|v| v * s + m);
    }
    Ok(MultivariateSeries {
        values,
        labels: series.labels().map(|l| l.to_vec()),
        dim_names: series.dim_names().map(|n| n.to_vec()),
    })
}

/// Standardizes a bare matrix in place using `stats`.
pub fn standardize_matrix(values: &mut Array2<f64>, stats: &StandardizationStats) {
    for j in 0..values.ncols() {
        let (m, s) = (stats.mean[j], stats.std[j]);
        values.column_mut(j).mapv_inplace(|v| (v - m) / s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series_from(values: Array2<f64>) -> MultivariateSeries {
        MultivariateSeries::new(values).unwrap()
    }

    #[test]
    fn window_counts_and_end_indices() {
        let s = series_from(Array2::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64));
        let ws = sliding_windows(&s, 5).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].end_index(), 4);
        assert_eq!(ws[1].end_index(), 5);

        let exact = sliding_windows(&s, 6).unwrap();
        assert_eq!(exact.len(), 1);

        let err = sliding_windows(&s, 7).unwrap_err();
        assert!(matches!(err, Error::EmptyInput { needed: 7, got: 6 }));
    }

    #[test]
    fn window_last_rows_reconstruct_series_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = series_from(Array2::from_shape_fn((40, 3), |_| rng.gen_range(-5.0..5.0)));
        for k in [2, 5, 9] {
            let ws = sliding_windows(&s, k).unwrap();
            for (i, w) in ws.iter().enumerate() {
                let t = k - 1 + i;
                assert_eq!(w.end_index(), t);
                let last = w.values().row(k - 1);
                let expect = s.values().row(t);
                assert_eq!(last, expect);
                assert_eq!(w.row(t), expect);
            }
        }
    }

    #[test]
    fn two_point_column_stats() {
        let s = series_from(array![[0.0, 10.0], [2.0, 30.0]]);
        let st = fit_standardizer(&s).unwrap();
        assert!((st.mean[0] - 1.0).abs() < 1e-15);
        assert!((st.std[0] - 1.0).abs() < 1e-15);
        assert!((st.mean[1] - 20.0).abs() < 1e-15);
        assert!((st.std[1] - 10.0).abs() < 1e-15);
    }

    #[test]
    fn constant_dimension_is_rejected_by_name() {
        let s = series_from(array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
            .with_dim_names(vec!["a".into(), "pressure".into()])
            .unwrap();
        match fit_standardizer(&s) {
            Err(Error::DegenerateDimension { index: 1, name }) => assert_eq!(name, "pressure"),
            other => panic!("expected degenerate-dimension error, got {other:?}"),
        }
    }

    #[test]
    fn fit_matches_brute_force_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((500, 4), |_| rng.gen_range(-100.0..100.0));
        let s = series_from(x.clone());
        let st = fit_standardizer(&s).unwrap();
        for j in 0..4 {
            let mut sum = 0.0;
            for t in 0..500 {
                sum += x[[t, j]];
            }
            let mean = sum / 500.0;
            let mut sq = 0.0;
            for t in 0..500 {
                sq += (x[[t, j]] - mean) * (x[[t, j]] - mean);
            }
            let std = (sq / 500.0).sqrt();
            assert!((st.mean[j] - mean).abs() < 1e-12);
            assert!((st.std[j] - std).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_round_trip_and_self_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = series_from(Array2::from_shape_fn((100, 4), |_| rng.gen_range(-50.0..50.0)));
        let st = fit_standardizer(&s).unwrap();

        let z = apply_standardizer(&s, &st).unwrap();
        let zst = fit_standardizer(&z).unwrap();
        for j in 0..4 {
            assert!(zst.mean[j].abs() < 1e-9);
            assert!((zst.std[j] - 1.0).abs() < 1e-9);
        }

        let back = invert_standardizer(&z, &st).unwrap();
        let max_err = (back.values() - s.values())
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10, "round-trip error {max_err}");

        let idz = apply_standardizer(&s, &StandardizationStats::identity(4)).unwrap();
        assert_eq!(idz.values(), s.values());
    }

    #[test]
    fn standardizing_a_standardized_series_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = series_from(Array2::from_shape_fn((200, 3), |_| rng.gen_range(-1.0..1.0)));
        let st = fit_standardizer(&s).unwrap();
        let z = apply_standardizer(&s, &st).unwrap();
        let st2 = fit_standardizer(&z).unwrap();
        for j in 0..3 {
            assert!(st2.mean[j].abs() < 1e-12);
            assert!((st2.std[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let err = MultivariateSeries::new(array![[1.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn labels_must_match_length() {
        let s = series_from(array![[1.0], [2.0]]);
        assert!(s.clone().with_labels(vec![true, false]).is_ok());
        assert!(matches!(
            series_from(array![[1.0], [2.0]]).with_labels(vec![true]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn window_at_needs_history() {
        let s = series_from(Array2::from_shape_fn((10, 2), |(i, _)| i as f64));
        let w = window_at(&s, 4, 5).unwrap();
        assert_eq!(w.end_index(), 4);
        assert_eq!(w.values().nrows(), 5);
        assert!(matches!(
            window_at(&s, 3, 5),
            Err(Error::InsufficientHistory { t: 3, k: 5 })
        ));
    }
}
