//! Synthetic Gaussian-cluster classification data, CSV ingestion and seeded
//! mini-batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Loaded from a file; no split semantics attached.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × input_dim`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != labels.len() {
            return Err(Error::Input(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows `idx` as a feature matrix plus their labels.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// `num_classes` rows of length `input_dim`.
    pub cluster_means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation around each mean.
    pub cluster_scale: f64,
    /// Fraction of labels re-drawn uniformly at random.
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Means drawn i.i.d. `N(0, mean_spread²)` per coordinate from `seed`.
    pub fn with_random_means(
        num_classes: usize,
        input_dim: usize,
        samples_per_class: usize,
        mean_spread: f64,
        cluster_scale: f64,
        label_noise: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(seed, "data.means");
        let cluster_means = (0..num_classes)
            .map(|_| {
                (0..input_dim)
                    .map(|_| mean_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        SyntheticSpec {
            num_classes,
            input_dim,
            samples_per_class,
            cluster_means,
            cluster_scale,
            label_noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.input_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Spec(format!(
                "need >= 2 classes and positive counts, got {} classes, dim {}, {} per class",
                self.num_classes, self.input_dim, self.samples_per_class
            )));
        }
        if self.cluster_means.len() != self.num_classes
            || self.cluster_means.iter().any(|m| m.len() != self.input_dim)
        {
            return Err(Error::Spec(
                "cluster means must be num_classes × input_dim".into(),
            ));
        }
        if !self.cluster_scale.is_finite() || self.cluster_scale <= 0.0 {
            return Err(Error::Spec(format!(
                "cluster_scale must be > 0, got {}",
                self.cluster_scale
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Spec(format!(
                "label_noise must lie in [0, 1), got {}",
                self.label_noise
            )));
        }
        for i in 0..self.num_classes {
            for j in i + 1..self.num_classes {
                if self.cluster_means[i] == self.cluster_means[j] {
                    return Err(Error::Spec(format!("cluster means {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Draws the clusters and splits each class 80/20 into train/test.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut rng = seed::rng(spec.seed, "data.samples");
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (c, mean) in spec.cluster_means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let row = (0..d)
                .map(|j| mean[j] + spec.cluster_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            rows.push(row);
            labels.push(c);
        }
    }
    let mut noise_rng = seed::rng(spec.seed, "data.noise");
    let mut observed = labels.clone();
    for y in observed.iter_mut() {
        if noise_rng.random::<f64>() < spec.label_noise {
            *y = noise_rng.random_range(0..spec.num_classes);
        }
    }

    let mut split_rng = seed::rng(spec.seed, "data.split");
    let per_train = spec.samples_per_class * 4 / 5;
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for c in 0..spec.num_classes {
        let mut idx: Vec<usize> =
            (c * spec.samples_per_class..(c + 1) * spec.samples_per_class).collect();
        idx.shuffle(&mut split_rng);
        train_idx.extend_from_slice(&idx[..per_train]);
        test_idx.extend_from_slice(&idx[per_train..]);
    }
    train_idx.shuffle(&mut split_rng);
    test_idx.shuffle(&mut split_rng);

    let build = |idx: &[usize], split| -> Result<Dataset> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&rows[i]);
        }
        Dataset::new(
            Tensor::new(vec![idx.len(), d], data)?,
            idx.iter().map(|&i| observed[i]).collect(),
            spec.num_classes,
            split,
        )
    };
    Ok((
        build(&train_idx, Split::Train)?,
        build(&test_idx, Split::Test)?,
    ))
}

/// Expected layout of a CSV file; `None` fields are inferred.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CsvSchema {
    pub input_dim: Option<usize>,
    pub num_classes: Option<usize>,
}

/// Writes `f1,...,fd,label` rows behind a `#` header line. Floats use the
/// shortest representation that parses back to the same bits.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let d = ds.input_dim();
    let mut header: Vec<String> = (1..=d).map(|j| format!("f{j}")).collect();
    header[0].insert(0, '#');
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    for (i, y) in ds.labels.iter().enumerate() {
        let mut row: Vec<String> = ds.features.row(i).iter().map(f64::to_string).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<Dataset> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = schema.input_dim;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Io(format!("malformed CSV: {e}")))?;
        let lineno = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(Error::Io(format!(
                "line {lineno}: expected features followed by a label"
            )));
        }
        let n = record.len() - 1;
        match width {
            Some(w) if w != n => {
                return Err(Error::Io(format!(
                    "line {lineno}: expected {w} features, found {n}"
                )))
            }
            None => width = Some(n),
            _ => {}
        }
        for f in record.iter().take(n) {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Io(format!("line {lineno}: non-numeric field `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::Io(format!("line {lineno}: non-finite value `{f}`")));
            }
            data.push(v);
        }
        let label = &record[n];
        let y: usize = label.parse().map_err(|_| {
            Error::Io(format!(
                "line {lineno}: label `{label}` is not a class index"
            ))
        })?;
        if let Some(m) = schema.num_classes {
            if y >= m {
                return Err(Error::Io(format!(
                    "line {lineno}: label {y} out of range for {m} classes"
                )));
            }
        }
        labels.push(y);
    }
    let Some(width) = width.filter(|_| !labels.is_empty()) else {
        return Err(Error::Input("CSV file contains no samples".into()));
    };
    let classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    Dataset::new(
        Tensor::new(vec![labels.len(), width], data)?,
        labels,
        classes,
        Split::External,
    )
}

/// Index batches for one epoch. The order is a pure function of
/// `(seed, epoch)`; the final batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut seed::rng(seed, &format!("batches.epoch{epoch}")));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Consecutive, unshuffled batches (evaluation order).
pub fn sequential_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..len).collect();
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
