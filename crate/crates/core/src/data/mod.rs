//! Multi-view datasets: per-view feature matrices, multi-hot labels and a
//! train / retrieval / query split.

mod manifest;
pub mod mvhf;
mod synth;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nd::Tensor;

pub use manifest::{load, save, Manifest, SplitPaths, ViewDescriptor};
pub use mvhf::{Mvhf, Payload};
pub use synth::{synth, LabelsPerSample, SynthConfig};

/// N×C multi-hot label matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    rows: usize,
    classes: usize,
    data: Vec<u8>,
}

impl Labels {
    /// Entries must be 0 or 1.
    pub fn new(rows: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(Error::Shape(format!(
                "label buffer of length {} cannot hold {rows}x{classes}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!(
                "label ({}, {}) is {}, expected 0 or 1",
                pos / classes,
                pos % classes,
                data[pos]
            )));
        }
        Ok(Self {
            rows,
            classes,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Label dot product between rows of two matrices.
    pub fn overlap(&self, i: usize, other: &Labels, j: usize) -> u32 {
        self.row(i)
            .iter()
            .zip(other.row(j))
            .map(|(&a, &b)| u32::from(a & b))
            .sum()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Labels {
        let mut data = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Labels {
            rows: indices.len(),
            classes: self.classes,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.rows,
            self.classes,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("label shape")
    }

    /// Index of the first row with no positive label.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| self.row(i).iter().all(|&v| v == 0))
    }
}

/// One modality's features.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub features: Tensor,
    /// Whether training should z-score this view.
    pub zscore: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub retrieval: Vec<usize>,
    pub query: Vec<usize>,
}

impl Split {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.retrieval.is_empty() && self.query.is_empty()
    }

    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Retrieval => &self.retrieval,
            SplitPart::Query => &self.query,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (part, idx) in [
            ("train", &self.train),
            ("retrieval", &self.retrieval),
            ("query", &self.query),
        ] {
            for &i in idx {
                if i >= n {
                    return Err(Error::Validation(format!(
                        "{part} split index {i} out of range for {n} samples"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Validation(format!(
                        "sample {i} appears in more than one split slot ({part})"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Retrieval,
    Query,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "retrieval" => Ok(SplitPart::Retrieval),
            "query" => Ok(SplitPart::Query),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    pub views: Vec<View>,
    pub labels: Labels,
    pub split: Split,
}

impl MultiViewDataset {
    /// Builds a dataset and checks every structural invariant.
    pub fn new(name: impl Into<String>, views: Vec<View>, labels: Labels, split: Split) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            views,
            labels,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Validation("dataset has no views".into()));
        }
        let n = self.labels.rows();
        for v in &self.views {
            if v.features.rows() != n {
                return Err(Error::Validation(format!(
                    "view {:?} has {} rows but labels have {n}",
                    v.name,
                    v.features.rows()
                )));
            }
            if !v.features.is_finite() {
                return Err(Error::Validation(format!(
                    "view {:?} contains non-finite values",
                    v.name
                )));
            }
        }
        if let Some(row) = self.labels.first_empty_row() {
            return Err(Error::Validation(format!(
                "sample {row} has no positive label"
            )));
        }
        self.split.check(n)
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.features.cols()).collect()
    }

    /// Per-view feature rows for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Vec<Tensor> {
        self.views
            .iter()
            .map(|v| v.features.select_rows(indices))
            .collect()
    }

    /// Replaces the split with a fresh seeded partition of the given sizes.
    pub fn with_split(mut self, sizes: SplitSizes, seed: u64) -> Result<Self> {
        self.split = split(self.len(), sizes, seed)?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub retrieval: usize,
    pub query: usize,
}

/// Seeded disjoint partition of `0..n` into train, retrieval and query
/// indices; samples beyond the requested sizes are left unused.
pub fn split(n: usize, sizes: SplitSizes, seed: u64) -> Result<Split> {
    let total = sizes
        .train
        .checked_add(sizes.retrieval)
        .and_then(|s| s.checked_add(sizes.query));
    if total.is_none_or(|t| t > n) {
        return Err(Error::Config(format!(
            "split sizes {}+{}+{} exceed {n} samples",
            sizes.train, sizes.retrieval, sizes.query
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = order.into_iter();
    let mut take = |k: usize| rest.by_ref().take(k).collect::<Vec<_>>();
    Ok(Split {
        train: take(sizes.train),
        retrieval: take(sizes.retrieval),
        query: take(sizes.query),
    })
}

/// Per-column mean and standard deviation of each view, fitted on a subset
/// of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    /// One `(mean, std)` pair of 1×D rows per view; `None` for views that are
    /// passed through unchanged.
    pub stats: Vec<Option<(Tensor, Tensor)>>,
}

impl Standardizer {
    pub fn identity(n_views: usize) -> Self {
        Self {
            stats: vec![None; n_views],
        }
    }

    /// Fits on `rows` of every view whose `zscore` flag is set.
    pub fn fit(ds: &MultiViewDataset, rows: &[usize]) -> Self {
        let stats = ds
            .views
            .iter()
            .map(|v| v.zscore.then(|| column_stats(&v.features, rows)))
            .collect();
        Self { stats }
    }

    pub fn apply(&self, view: usize, x: &Tensor) -> Tensor {
        let Some((mean, std)) = self.stats.get(view).and_then(|s| s.as_ref()) else {
            return x.clone();
        };
        Tensor::from_fn(x.rows(), x.cols(), |r, c| {
            (x.get(r, c) - mean.get(0, c)) / std.get(0, c)
        })
    }

    pub fn apply_all(&self, views: &[Tensor]) -> Vec<Tensor> {
        views
            .iter()
            .enumerate()
            .map(|(m, x)| self.apply(m, x))
            .collect()
    }
}

fn column_stats(x: &Tensor, rows: &[usize]) -> (Tensor, Tensor) {
    let d = x.cols();
    let n = rows.len().max(1) as f64;
    let mut mean = Tensor::zeros(1, d);
    for &r in rows {
        for (m, v) in mean.data_mut().iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.data_mut().iter_mut().for_each(|m| *m /= n);
    let mut var = Tensor::zeros(1, d);
    for &r in rows {
        for ((s, v), m) in var.data_mut().iter_mut().zip(x.row(r)).zip(mean.data()) {
            *s += (v - m) * (v - m);
        }
    }
    // constant columns keep unit scale
    let std = Tensor::from_fn(1, d, |_, c| {
        let s = (var.get(0, c) / n).sqrt();
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    });
    (mean, std)
}

pub(crate) fn read_mvhf(path: &Path) -> Result<Mvhf> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Mvhf::read_from(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_mvhf(path: &Path, m: &Mvhf) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    m.write_to(&mut w)
        .map_err(|e| Error::format(path, e.to_string()))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}
