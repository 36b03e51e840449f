//! Multi-condition observations and their within/between split.
//!
//! Data are stored variables-by-observations (`p × n`). On construction the
//! grand mean is subtracted so that the condition means sum to zero under the
//! proportion weights; the subtracted offset is kept for reporting.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::g17;
use crate::linalg::symmetrize;

/// Name of the CSV column holding condition labels.
pub const CONDITION_COLUMN: &str = "condition";

/// Divisor used for per-condition covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    /// divide by `n_i`
    #[default]
    Population,
    /// divide by `n_i - 1`
    Sample,
}

#[derive(Debug, Clone)]
pub struct ConditionDataset {
    data: Array2<f64>,
    labels: Vec<usize>,
    level_names: Vec<String>,
    variable_names: Vec<String>,
    counts: Vec<usize>,
    proportions: Vec<f64>,
    offset: Array1<f64>,
}

/// Per-condition means and covariances plus the between-condition covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMoments {
    /// `k` mean vectors of length `p`.
    #[serde(with = "crate::json::vectors")]
    pub means: Vec<Array1<f64>>,
    /// `k` symmetric `p × p` within-condition covariances.
    #[serde(with = "crate::json::matrices")]
    pub covariances: Vec<Array2<f64>>,
    /// `Σ_i π_i μ_i μ_iᵀ`.
    #[serde(with = "crate::json::matrix")]
    pub between_covariance: Array2<f64>,
    pub proportions: Vec<f64>,
}

impl ConditionMoments {
    /// Assemble moments from means, covariances and weights, computing the
    /// between covariance.
    pub fn new(
        means: Vec<Array1<f64>>,
        covariances: Vec<Array2<f64>>,
        proportions: Vec<f64>,
    ) -> Result<Self> {
        let k = means.len();
        if k == 0 || covariances.len() != k || proportions.len() != k {
            return Err(Error::Shape(format!(
                "{} means, {} covariances, {} proportions",
                k,
                covariances.len(),
                proportions.len()
            )));
        }
        let p = means[0].len();
        for (m, s) in means.iter().zip(&covariances) {
            if m.len() != p || s.dim() != (p, p) {
                return Err(Error::Shape(format!(
                    "expected means of length {p} and {p}x{p} covariances"
                )));
            }
        }
        check_proportions(&proportions)?;
        let between_covariance = between_covariance(&means, &proportions);
        Ok(Self {
            means,
            covariances,
            between_covariance,
            proportions,
        })
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn p(&self) -> usize {
        self.between_covariance.nrows()
    }

    /// Weighted mean of the condition means.
    pub fn grand_mean(&self) -> Array1<f64> {
        let mut g = Array1::zeros(self.p());
        for (m, &w) in self.means.iter().zip(&self.proportions) {
            g.scaled_add(w, m);
        }
        g
    }

    /// `Σ_i π_i Σ_i`.
    pub fn pooled_within(&self) -> Array2<f64> {
        let p = self.p();
        let mut pooled = Array2::zeros((p, p));
        for (s, &w) in self.covariances.iter().zip(&self.proportions) {
            pooled.scaled_add(w, s);
        }
        pooled
    }

    /// Covariance of the pooled data: `Σ_i π_i Σ_i + Σ^b`.
    pub fn total_covariance(&self) -> Array2<f64> {
        self.pooled_within() + &self.between_covariance
    }

    /// Condition means as the columns of a `p × k` matrix.
    pub fn mean_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.p(), self.k()));
        for (i, m) in self.means.iter().enumerate() {
            out.column_mut(i).assign(m);
        }
        out
    }
}

fn between_covariance(means: &[Array1<f64>], proportions: &[f64]) -> Array2<f64> {
    let p = means.first().map_or(0, |m| m.len());
    let mut out = Array2::zeros((p, p));
    for (m, &w) in means.iter().zip(proportions) {
        for a in 0..p {
            for b in 0..p {
                out[[a, b]] += w * m[a] * m[b];
            }
        }
    }
    out
}

fn check_proportions(proportions: &[f64]) -> Result<()> {
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-12 || proportions.iter().any(|&w| w.is_nan() || w <= 0.0) {
        return Err(Error::Invalid(format!(
            "proportions must be positive and sum to 1, got {proportions:?}"
        )));
    }
    Ok(())
}

/// Population covariance `X Xᵀ / n` of an already centred `p × n` block.
pub fn population_covariance(centered: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = centered.ncols().max(1) as f64;
    let mut s = centered.dot(&centered.t()) / n;
    symmetrize(&mut s);
    s
}

impl ConditionDataset {
    /// Group `p × n` data by 1-based condition labels.
    ///
    /// The number of levels is the largest label; every level in `1..=k`
    /// must occur. The data are grand-centred.
    pub fn partition_by_condition(data: Array2<f64>, labels: &[usize]) -> Result<Self> {
        let k = labels.iter().copied().max().unwrap_or(0);
        let names = (1..=k).map(|i| i.to_string()).collect();
        let zero_based = labels
            .iter()
            .enumerate()
            .map(|(index, &label)| {
                if label == 0 || label > k {
                    Err(Error::BadLabel { index, label, k })
                } else {
                    Ok(label - 1)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let variables = (1..=data.nrows()).map(|j| format!("v{j}")).collect();
        Self::build(data, zero_based, names, variables)
    }

    /// Group data by arbitrary string labels, numbering levels in order of
    /// first appearance.
    pub fn from_named_labels<S: AsRef<str>>(data: Array2<f64>, labels: &[S]) -> Result<Self> {
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut names = Vec::new();
        let mut indices = Vec::with_capacity(labels.len());
        for label in labels {
            let label = label.as_ref();
            let next = names.len();
            let idx = *lookup.entry(label).or_insert_with(|| {
                names.push(label.to_string());
                next
            });
            indices.push(idx);
        }
        let variables = (1..=data.nrows()).map(|j| format!("v{j}")).collect();
        Self::build(data, indices, names, variables)
    }

    fn build(
        mut data: Array2<f64>,
        labels: Vec<usize>,
        level_names: Vec<String>,
        variable_names: Vec<String>,
    ) -> Result<Self> {
        let (p, n) = data.dim();
        let k = level_names.len();
        if p == 0 {
            return Err(Error::InsufficientData("no variables".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {} observations",
                labels.len(),
                n
            )));
        }
        if k == 0 || n < k {
            return Err(Error::InsufficientData(format!(
                "{n} observations for {k} condition levels"
            )));
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingLevel(missing + 1));
        }
        let proportions = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let offset = data.mean_axis(Axis(1)).expect("n > 0");
        for mut col in data.axis_iter_mut(Axis(1)) {
            col -= &offset;
        }
        Ok(Self {
            data,
            labels,
            level_names,
            variable_names,
            counts,
            proportions,
            offset,
        })
    }

    pub fn with_variable_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::Shape(format!(
                "{} variable names for {} variables",
                names.len(),
                self.p()
            )));
        }
        self.variable_names = names;
        Ok(self)
    }

    /// Grand-centred data, `p × n`.
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Zero-based condition index of each observation.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn level_names(&self) -> &[String] {
        &self.level_names
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    /// Grand mean subtracted on ingestion.
    pub fn offset(&self) -> &Array1<f64> {
        &self.offset
    }

    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn k(&self) -> usize {
        self.level_names.len()
    }

    /// Observation indices belonging to zero-based level `level`.
    pub fn indices_of(&self, level: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(t, &l)| (l == level).then_some(t))
            .collect()
    }

    /// The columns of `matrix` that belong to `level`, in observation order.
    pub fn select_level(&self, matrix: &Array2<f64>, level: usize) -> Array2<f64> {
        matrix.select(Axis(1), &self.indices_of(level))
    }

    /// Condition means of the grand-centred data.
    pub fn condition_means(&self) -> Vec<Array1<f64>> {
        condition_means_of(&self.data, &self.labels, self.k())
    }

    /// Each observation minus its condition mean.
    pub fn center_within(&self) -> Array2<f64> {
        let means = self.condition_means();
        let mut out = self.data.clone();
        for (mut col, &l) in out.axis_iter_mut(Axis(1)).zip(&self.labels) {
            col -= &means[l];
        }
        out
    }

    /// Matrix whose column `t` is the mean of observation `t`'s condition.
    pub fn between_replicate(&self) -> Array2<f64> {
        let means = self.condition_means();
        let mut out = Array2::zeros(self.data.raw_dim());
        for (mut col, &l) in out.axis_iter_mut(Axis(1)).zip(&self.labels) {
            col.assign(&means[l]);
        }
        out
    }

    pub fn condition_moments(&self, mode: CovarianceMode) -> Result<ConditionMoments> {
        let means = self.condition_means();
        let within = self.center_within();
        let mut covariances = Vec::with_capacity(self.k());
        for level in 0..self.k() {
            let block = self.select_level(&within, level);
            let n_i = block.ncols();
            let divisor = match mode {
                CovarianceMode::Population => n_i as f64,
                CovarianceMode::Sample => {
                    if n_i < 2 {
                        return Err(Error::InsufficientData(format!(
                            "condition `{}` has {} observation(s); sample covariance needs 2",
                            self.level_names[level], n_i
                        )));
                    }
                    (n_i - 1) as f64
                }
            };
            let mut s = block.dot(&block.t()) / divisor;
            symmetrize(&mut s);
            covariances.push(s);
        }
        let between_covariance = between_covariance(&means, &self.proportions);
        Ok(ConditionMoments {
            means,
            covariances,
            between_covariance,
            proportions: self.proportions.clone(),
        })
    }

    /// Read a CSV with a header row, one `condition` column and numeric
    /// variable columns.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
        if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
            return Err(Error::Parse {
                row: 1,
                column: 1,
                message: "missing header row".into(),
            });
        }
        let cond_col = header
            .iter()
            .position(|h| h == CONDITION_COLUMN)
            .ok_or_else(|| Error::Parse {
                row: 1,
                column: 1,
                message: format!("no `{CONDITION_COLUMN}` column in header"),
            })?;
        let variable_names: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != cond_col)
            .map(|(_, h)| h.to_string())
            .collect();
        if variable_names.is_empty() {
            return Err(Error::Parse {
                row: 1,
                column: 1,
                message: "no variable columns".into(),
            });
        }

        let p = variable_names.len();
        let mut values: Vec<f64> = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let row = r + 2;
            let record = record.map_err(|e| csv_error(e, row))?;
            if record.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    column: record.len().min(header.len()) + 1,
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            for (j, field) in record.iter().enumerate() {
                if j == cond_col {
                    if field.is_empty() {
                        return Err(Error::Parse {
                            row,
                            column: j + 1,
                            message: "empty condition label".into(),
                        });
                    }
                    labels.push(field.to_string());
                } else {
                    let v: f64 = field.parse().map_err(|_| Error::Parse {
                        row,
                        column: j + 1,
                        message: format!("`{field}` is not a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            row,
                            column: j + 1,
                            message: format!("`{field}` is not finite"),
                        });
                    }
                    values.push(v);
                }
            }
        }
        let n = labels.len();
        if n == 0 {
            return Err(Error::Parse {
                row: 2,
                column: 1,
                message: "no observations".into(),
            });
        }
        // rows are observations; store transposed
        let data = Array2::from_shape_vec((n, p), values)
            .expect("row lengths checked")
            .reversed_axes()
            .as_standard_layout()
            .to_owned();
        Self::from_named_labels(data, &labels)?.with_variable_names(variable_names)
    }

    /// Write the data as ingested (offset added back) in the CSV layout read
    /// by [`ConditionDataset::read_csv`].
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![CONDITION_COLUMN.to_string()];
        header.extend(self.variable_names.iter().cloned());
        w.write_record(&header).map_err(csv_write_error)?;
        for (t, &l) in self.labels.iter().enumerate() {
            let mut row = Vec::with_capacity(self.p() + 1);
            row.push(self.level_names[l].clone());
            for j in 0..self.p() {
                row.push(g17(self.data[[j, t]] + self.offset[j]));
            }
            w.write_record(&row).map_err(csv_write_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-level means of the columns of `matrix`.
pub fn condition_means_of(matrix: &Array2<f64>, labels: &[usize], k: usize) -> Vec<Array1<f64>> {
    let rows = matrix.nrows();
    let mut sums = vec![Array1::<f64>::zeros(rows); k];
    let mut counts = vec![0usize; k];
    for (col, &l) in matrix.axis_iter(Axis(1)).zip(labels) {
        sums[l] += &col;
        counts[l] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| if c > 0 { s / c as f64 } else { s })
        .collect()
}

fn csv_error(e: csv::Error, row: usize) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(row);
    Error::Parse {
        row,
        column: 1,
        message: e.to_string(),
    }
}

fn csv_write_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Invalid(format!("{other:?}")),
    }
}
