//! Labelled feature matrices: CSV loading and seeded Gaussian clusters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::DatasetSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum distance between synthetic cluster means.
pub const MIN_MEAN_SEPARATION: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `samples × dim`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if !features.is_matrix() || features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("features {:?} with {} labels", features.shape(), labels.len()),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                row: row + 1,
                label,
                classes,
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let src = self.features.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let x = Tensor::new(vec![indices.len(), d], data).expect("rows of a valid matrix");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// `batch`-sized chunks of a permutation drawn from `seed`.
    pub fn shuffled_batches(&self, batch: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Parses CSV text where every column but the last is a feature and the last
/// is an integer label. Rows are numbered by file line in errors.
pub fn parse_csv(text: &str, classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedCsv {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::MalformedCsv { row, message };
        if record.len() < 2 {
            return Err(bad("need at least one feature and a label".into()));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => return Err(bad(format!("{} fields, expected {w}", record.len()))),
            _ => {}
        }
        let label_field = &record[record.len() - 1];
        for f in record.iter().take(record.len() - 1) {
            let v: f64 = f.parse().map_err(|_| bad(format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite feature `{f}`")));
            }
            data.push(v);
        }
        let label: usize = label_field
            .parse()
            .map_err(|_| bad(format!("label `{label_field}` is not a non-negative integer")))?;
        if let Some(c) = classes.filter(|&c| label >= c) {
            return Err(Error::LabelOutOfRange { row, label, classes: c });
        }
        labels.push(label);
    }
    let Some(w) = width else {
        return Err(Error::MalformedCsv {
            row: 0,
            message: "no rows".into(),
        });
    };
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    let features = Tensor::new(vec![labels.len(), w - 1], data)?;
    Dataset::new(features, labels, classes)
}

pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?, classes)
}

/// `clusters` unit-variance Gaussian blobs in `dim` dimensions with means at
/// least [`MIN_MEAN_SEPARATION`] apart. Sample `i` belongs to cluster
/// `i % clusters`.
pub fn synthetic(clusters: usize, dim: usize, samples: usize, seed: u64) -> Result<Dataset> {
    if clusters < 2 || dim == 0 || samples < clusters {
        return Err(Error::InvalidArgument(format!(
            "synthetic({clusters}, {dim}, {samples})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Spread the means so a typical pair lands well past the separation.
    let spread = 1.5 * MIN_MEAN_SEPARATION / (2.0 * dim as f64).sqrt();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(clusters);
    let mut attempts = 0;
    while means.len() < clusters {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidArgument(format!(
                "cannot place {clusters} separated means in {dim} dimensions"
            )));
        }
        let candidate: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                spread * z
            })
            .collect();
        let far = means.iter().all(|m| {
            let d2: f64 = m.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= MIN_MEAN_SEPARATION
        });
        if far {
            means.push(candidate);
        }
    }
    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % clusters;
        for &m in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + z);
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![samples, dim], data)?, labels, clusters)
}

/// Builds the dataset a configuration names.
pub fn load_dataset(spec: &DatasetSpec, classes: Option<usize>, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic { clusters, dim, samples } => synthetic(*clusters, *dim, *samples, seed),
        DatasetSpec::Csv(path) => load_csv(path, classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_example() {
        let ds = parse_csv("1.0,2.0,0\n3.0,4.0,1\n", None).unwrap();
        assert_eq!(ds.features, Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.classes, 2);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let err = parse_csv("1.0,2.0,0\n3.0,x,1\n", None).unwrap_err();
        assert!(matches!(err, Error::MalformedCsv { row: 2, .. }), "{err:?}");
        let err = parse_csv("1.0,2.0,0\n3.0,1\n", None).unwrap_err();
        assert!(matches!(err, Error::MalformedCsv { row: 2, .. }), "{err:?}");
        let err = parse_csv("1.0,2.0,0\n3.0,4.0,5\n", Some(3)).unwrap_err();
        assert!(
            matches!(err, Error::LabelOutOfRange { row: 2, label: 5, classes: 3 }),
            "{err:?}"
        );
        let err = parse_csv("1.0,2.0,-1\n", None).unwrap_err();
        assert!(matches!(err, Error::MalformedCsv { row: 1, .. }));
    }

    #[test]
    fn synthetic_is_seeded_and_separated() {
        let a = synthetic(4, 64, 512, 7).unwrap();
        let b = synthetic(4, 64, 512, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthetic(4, 64, 512, 8).unwrap());
        assert_eq!(a.features.shape(), &[512, 64]);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 128);
        }
        // Empirical cluster means are close to the true ones, so their
        // separation is visible in the data.
        let mut means = vec![vec![0.0; 64]; 4];
        for (i, &l) in a.labels.iter().enumerate() {
            for (j, m) in means[l].iter_mut().enumerate() {
                *m += a.features.at(i, j) / 128.0;
            }
        }
        for i in 0..4 {
            for j in 0..i {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(d > 5.0, "clusters {i},{j} at {d}");
            }
        }
    }

    #[test]
    fn batches_cover_everything_once() {
        let ds = synthetic(2, 3, 10, 1).unwrap();
        let batches = ds.shuffled_batches(4, 3);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
