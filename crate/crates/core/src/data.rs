//! Dataset ingestion, standardization, splitting and synthetic generators.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, rng_from_seed, TAG_SPLIT};
use crate::{Error, Result};

/// Features, dense class ids and the names needed to decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub feature_names: Vec<String>,
    /// `label_names[id]` is the original label text of class `id`.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            features,
            labels,
            feature_names,
            label_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.features.dim();
        if n == 0 || d == 0 {
            return Err(Error::Data("dataset needs at least one row and one feature".into()));
        }
        if self.labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} rows", self.labels.len())));
        }
        if self.feature_names.len() != d {
            return Err(Error::Data(format!("{} feature names for {d} columns", self.feature_names.len())));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("features contain NaN or infinite values".into()));
        }
        let classes = self.class_count();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label id {bad} has no name")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.label_names.len()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Drop rows with any missing feature.
    #[default]
    Drop,
    /// Replace missing cells with the mean of the column's present values.
    MeanImpute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelOrder {
    /// Class ids follow the order in which labels first appear in the file.
    #[default]
    FirstAppearance,
    /// Class ids follow sorted label order (numeric when every label is a number).
    Sorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvOptions {
    pub label_column: String,
    pub missing: MissingPolicy,
    /// Fail on non-numeric feature cells instead of treating them as missing.
    pub strict: bool,
    pub label_order: LabelOrder,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            label_column: "label".into(),
            missing: MissingPolicy::Drop,
            strict: true,
            label_order: LabelOrder::FirstAppearance,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null" | "?")
}

fn open_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(BufReader::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Loads a headed, comma-delimited CSV file (gzip when the name ends in `.gz`).
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    read_csv(open_reader(path.as_ref())?, options)
}

pub fn read_csv<R: Read>(reader: R, options: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Data("file is empty or has no header".into()));
    }
    let label_idx = headers
        .iter()
        .position(|h| *h == options.label_column)
        .ok_or_else(|| Error::Data(format!("label column '{}' not found", options.label_column)))?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row_no = r + 2; // 1-based, header is line 1
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: row_no,
                column: "*".into(),
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        let label = record[label_idx].trim();
        if is_missing(label) {
            continue;
        }
        let mut values = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let cell = record[c].trim();
            if is_missing(cell) {
                values.push(None);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(Some(v)),
                _ if options.strict => {
                    return Err(Error::Parse {
                        row: row_no,
                        column: headers[c].clone(),
                        message: format!("cannot parse '{cell}' as a finite number"),
                    })
                }
                _ => values.push(None),
            }
        }
        rows.push(values);
        raw_labels.push(label.to_string());
    }
    if rows.is_empty() {
        return Err(Error::Data("file contains no data rows".into()));
    }

    let d = feature_cols.len();
    let (rows, raw_labels) = match options.missing {
        MissingPolicy::Drop => {
            let keep: Vec<bool> = rows.iter().map(|r| r.iter().all(Option::is_some)).collect();
            let rows: Vec<_> = rows.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r).collect();
            let labels: Vec<_> = raw_labels.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(l, _)| l).collect();
            (rows, labels)
        }
        MissingPolicy::MeanImpute => {
            let mut means = vec![0.0; d];
            for (c, mean) in means.iter_mut().enumerate() {
                let present: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
                if present.is_empty() {
                    return Err(Error::Data(format!("column '{}' has no values", headers[feature_cols[c]])));
                }
                *mean = present.iter().sum::<f64>() / present.len() as f64;
            }
            let rows = rows
                .into_iter()
                .map(|r| r.into_iter().enumerate().map(|(c, v)| Some(v.unwrap_or(means[c]))).collect())
                .collect();
            (rows, raw_labels)
        }
    };
    if rows.is_empty() {
        return Err(Error::Data("no complete rows remain after dropping missing values".into()));
    }

    let label_names = label_vocabulary(&raw_labels, options.label_order);
    let index: HashMap<&str, usize> = label_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let labels = raw_labels.iter().map(|l| index[l.as_str()]).collect();
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().map(|v| v.unwrap()).collect();
    let features = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::Data(e.to_string()))?;
    let feature_names = feature_cols.iter().map(|&c| headers[c].clone()).collect();
    Dataset::new(features, labels, feature_names, label_names)
}

fn label_vocabulary(raw: &[String], order: LabelOrder) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for l in raw {
        if !names.contains(l) {
            names.push(l.clone());
        }
    }
    if order == LabelOrder::Sorted {
        let numeric: Option<Vec<f64>> = names.iter().map(|s| s.parse::<f64>().ok()).collect();
        match numeric {
            Some(_) => names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap())),
            None => names.sort(),
        }
    }
    names
}

/// Writes `dataset` with a header; labels are written by name.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let path = path.as_ref();
    let file = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        write_csv(dataset, &mut enc, label_column)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        write_csv(dataset, &mut file, label_column)?;
        file.flush()?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(dataset: &Dataset, writer: W, label_column: &str) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = dataset.feature_names.iter().map(String::as_str).collect();
    header.push(label_column);
    wtr.write_record(&header)?;
    for (row, &y) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(dataset.label_names[y].clone());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-feature standardization fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Floor applied to feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    /// Population mean and standard deviation per column.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("cannot standardize an empty dataset".into()));
        }
        let x = &dataset.features;
        let means = x.mean_axis(Axis(0)).unwrap();
        let stds: Array1<f64> = x.var_axis(Axis(0), 0.0).mapv(|v| v.sqrt().max(STD_FLOOR));
        if means.iter().chain(stds.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature statistics overflow".into()));
        }
        Ok(Standardizer {
            means: means.to_vec(),
            stds: stds.to_vec(),
        })
    }

    pub fn transform(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.means.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} features, data has {}",
                self.means.len(),
                features.ncols()
            )));
        }
        let means = Array1::from(self.means.clone());
        let stds = Array1::from(self.stds.clone());
        Ok((features - &means) / &stds)
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            features: self.transform(&dataset.features)?,
            ..dataset.clone()
        })
    }
}

/// Fits a [`Standardizer`] on `train` and returns it with the transformed set.
pub fn standardize(train: &Dataset) -> Result<(Standardizer, Dataset)> {
    let s = Standardizer::fit(train)?;
    let out = s.apply(train)?;
    Ok((s, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.57,
            val: 0.18,
            test: 0.25,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for f in [self.train, self.val, self.test] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!("split fraction {f} outside (0, 1)")));
            }
        }
        let s = self.train + self.val + self.test;
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions sum to {s}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` and cuts it; validation and test sizes are floored and
/// the remainder goes to training.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < 3 {
        return Err(Error::InvalidArgument("splitting needs at least three rows".into()));
    }
    let n_val = ((n as f64 * spec.val) + 1e-9).floor() as usize;
    let n_test = ((n as f64 * spec.test) + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(spec.seed, TAG_SPLIT, 0, 0, 0));
    Ok(SplitIndices {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let s = split_indices(dataset.len(), spec)?;
    Ok((dataset.select(&s.train), dataset.select(&s.val), dataset.select(&s.test)))
}

/// Parameters of the heterogeneous-subpopulation generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub k_true: usize,
    pub n_per_cluster: usize,
    pub dim: usize,
    pub separation: f64,
    pub flip_noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            k_true: 2,
            n_per_cluster: 2000,
            dim: 10,
            separation: 8.0,
            flip_noise: 0.02,
            seed: 0,
        }
    }
}

/// Angle by which each cluster's label rule is rotated after being negated.
pub const RULE_ROTATION: f64 = std::f64::consts::PI / 12.0;

/// Generated data plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// True cluster id of every row.
    pub clusters: Vec<usize>,
    /// One row per cluster.
    pub centers: Array2<f64>,
    /// Unit normal of each cluster's labelling hyperplane, one row per cluster.
    pub rules: Array2<f64>,
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Removes the components of `v` along each (unit) vector of `basis` and normalizes.
fn orthogonalize(mut v: Array1<f64>, basis: &[Array1<f64>]) -> Option<Array1<f64>> {
    for b in basis {
        let c = v.dot(b);
        v.scaled_add(-c, b);
    }
    let n = v.dot(&v).sqrt();
    (n > 1e-6).then(|| v / n)
}

/// Gaussian clusters whose label rules contradict each other.
///
/// Cluster `c` is an isotropic unit Gaussian centred at `separation * u_c`
/// with orthonormal `u_c` (when `k_true <= dim`). Its label is
/// `1{w_c . (x - center_c) > 0}`, where `w_{c+1}` is `-w_c` rotated by
/// [`RULE_ROTATION`], so adjacent rules point in opposing directions. Labels
/// are then flipped independently with probability `flip_noise`.
pub fn synth_heterogeneous(params: &SynthParams) -> Result<SyntheticData> {
    if params.k_true == 0 || params.n_per_cluster == 0 {
        return Err(Error::InvalidArgument("k_true and n_per_cluster must be positive".into()));
    }
    if params.dim < 2 {
        return Err(Error::InvalidArgument("dim must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&params.flip_noise) {
        return Err(Error::InvalidArgument("flip_noise must lie in [0, 1]".into()));
    }
    let (k, d) = (params.k_true, params.dim);
    let mut rng = rng_from_seed(params.seed);

    let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(k);
    while dirs.len() < k {
        let v = random_unit(d, &mut rng);
        let u = if dirs.len() < d { orthogonalize(v, &dirs) } else { Some(v) };
        if let Some(u) = u {
            dirs.push(u);
        }
    }
    let mut rules: Vec<Array1<f64>> = vec![random_unit(d, &mut rng)];
    while rules.len() < k {
        let prev = rules.last().unwrap().clone();
        let Some(perp) = orthogonalize(random_unit(d, &mut rng), std::slice::from_ref(&prev)) else {
            continue;
        };
        let rotated = &prev * RULE_ROTATION.cos() + &perp * RULE_ROTATION.sin();
        rules.push(-rotated);
    }

    let n = k * params.n_per_cluster;
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    for c in 0..k {
        let center = &dirs[c] * params.separation;
        for r in 0..params.n_per_cluster {
            let noise = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let mut y = usize::from(rules[c].dot(&noise) > 0.0);
            if rng.random::<f64>() < params.flip_noise {
                y = 1 - y;
            }
            features.row_mut(c * params.n_per_cluster + r).assign(&(&center + &noise));
            labels.push(y);
            clusters.push(c);
        }
    }
    let centers = Array2::from_shape_fn((k, d), |(c, j)| dirs[c][j] * params.separation);
    let rules = Array2::from_shape_fn((k, d), |(c, j)| rules[c][j]);
    let dataset = Dataset::new(
        features,
        labels,
        (0..d).map(|j| format!("x{j}")).collect(),
        vec!["0".into(), "1".into()],
    )?;
    Ok(SyntheticData {
        dataset,
        clusters,
        centers,
        rules,
    })
}
