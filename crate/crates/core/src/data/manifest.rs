//! JSON manifest naming the feature, label and split files of a dataset.
//!
//! ```json
//! {
//!   "name": "flickr",
//!   "views": [{"name": "vision", "path": "vision.mvhf", "dim": 4096}],
//!   "labels": "labels.mvhf",
//!   "splits": {"train": "train.idx", "retrieval": "retrieval.idx", "query": "query.idx"}
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Split files hold
//! one decimal sample index per line. A view may carry `"zscore": false` to
//! opt out of standardisation (default on).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_mvhf, write_mvhf, Labels, MultiViewDataset, Mvhf, Payload, Split, View};
use crate::error::{Error, Result};
use crate::nd::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub views: Vec<ViewDescriptor>,
    pub labels: PathBuf,
    pub splits: SplitPaths,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewDescriptor {
    pub name: String,
    pub path: PathBuf,
    pub dim: usize,
    #[serde(default = "default_true")]
    pub zscore: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub retrieval: PathBuf,
    pub query: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads every file named by the manifest at `path` and validates the
/// result. Values are returned as stored; standardisation is applied later.
pub fn load(path: &Path) -> Result<MultiViewDataset> {
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut views = Vec::with_capacity(manifest.views.len());
    for desc in &manifest.views {
        let file = resolve(base, &desc.path);
        let m = read_mvhf(&file)?;
        if m.k.is_some() {
            return Err(Error::format(&file, "packed code file where features were expected"));
        }
        if m.cols as usize != desc.dim {
            return Err(Error::Validation(format!(
                "view {:?}: manifest declares dim {} but {} has {} columns",
                desc.name,
                desc.dim,
                file.display(),
                m.cols
            )));
        }
        views.push(View {
            name: desc.name.clone(),
            features: Tensor::new(m.rows as usize, m.cols as usize, m.payload.to_f64())?,
            zscore: desc.zscore,
        });
    }

    let label_file = resolve(base, &manifest.labels);
    let lm = read_mvhf(&label_file)?;
    let Payload::U8(bytes) = lm.payload else {
        return Err(Error::format(&label_file, "labels must use dtype u8"));
    };
    let labels = Labels::new(lm.rows as usize, lm.cols as usize, bytes)?;

    let split = Split {
        train: read_indices(&resolve(base, &manifest.splits.train))?,
        retrieval: read_indices(&resolve(base, &manifest.splits.retrieval))?,
        query: read_indices(&resolve(base, &manifest.splits.query))?,
    };
    MultiViewDataset::new(manifest.name, views, labels, split)
}

/// Writes the dataset as f64 MVHF files plus manifest into `dir`; returns
/// the manifest path.
pub fn save(ds: &MultiViewDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut views = Vec::with_capacity(ds.views.len());
    for (m, v) in ds.views.iter().enumerate() {
        let file = PathBuf::from(format!("view{m}_{}.mvhf", sanitize(&v.name)));
        let f = &v.features;
        write_mvhf(
            &dir.join(&file),
            &Mvhf::matrix(f.rows(), f.cols(), Payload::F64(f.data().to_vec())),
        )?;
        views.push(ViewDescriptor {
            name: v.name.clone(),
            path: file,
            dim: f.cols(),
            zscore: v.zscore,
        });
    }
    let labels = PathBuf::from("labels.mvhf");
    write_mvhf(
        &dir.join(&labels),
        &Mvhf::matrix(
            ds.labels.rows(),
            ds.labels.classes(),
            Payload::U8(ds.labels.data().to_vec()),
        ),
    )?;
    let splits = SplitPaths {
        train: "train.idx".into(),
        retrieval: "retrieval.idx".into(),
        query: "query.idx".into(),
    };
    write_indices(&dir.join(&splits.train), &ds.split.train)?;
    write_indices(&dir.join(&splits.retrieval), &ds.split.retrieval)?;
    write_indices(&dir.join(&splits.query), &ds.split.query)?;

    let manifest = Manifest {
        name: ds.name.clone(),
        views,
        labels,
        splits,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub(crate) fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse().map_err(|_| {
                Error::format(path, format!("line {}: {:?} is not an index", n + 1, l))
            })
        })
        .collect()
}

pub(crate) fn write_indices(path: &Path, idx: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(idx.len() * 6);
    for i in idx {
        writeln!(text, "{i}").unwrap();
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
