//! Plumbing shared by the three learned stages: loss histories,
//! checkpoint files and tensor conversions.

use std::path::Path;

use p2v_nn::{Checkpoint, ParamStore, Tensor};
use serde::{de::DeserializeOwned, Serialize};

use crate::tensor_io::{Image2D, Volume3D};
use crate::{Error, Result};

/// Per-epoch loss table. The first column is always `loss_total`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistory {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossHistory {
    pub fn new(components: &[&str]) -> Self {
        let mut columns = vec!["loss_total".to_string()];
        columns.extend(components.iter().map(|c| c.to_string()));
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "loss row width");
        self.rows.push(row);
    }

    pub fn epochs(&self) -> usize {
        self.rows.len()
    }

    /// Values of one column across epochs.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("epoch,{}\n", self.columns.join(","));
        for (e, row) in self.rows.iter().enumerate() {
            out.push_str(&(e + 1).to_string());
            for v in row {
                out.push_str(&format!(",{v:.9}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Running means of several loss terms within one epoch.
pub(crate) struct EpochMeans {
    sums: Vec<f64>,
    n: usize,
}

impl EpochMeans {
    pub fn new(width: usize) -> Self {
        Self { sums: vec![0.0; width], n: 0 }
    }

    pub fn add(&mut self, values: &[f64]) {
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v;
        }
        self.n += 1;
    }

    pub fn finish(self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.sums.into_iter().map(|s| s / n).collect()
    }
}

/// What a stage stores beside its weights: the config that rebuilds the
/// networks and the spatial shape they were trained at.
#[derive(Serialize, serde::Deserialize)]
struct Metadata<C> {
    config: C,
    dims: [usize; 3],
}

pub(crate) fn save_checkpoint<C: Serialize>(
    path: &Path,
    stage: &str,
    config: &C,
    dims: [usize; 3],
    stores: &[(&str, &ParamStore)],
) -> Result<()> {
    let metadata = serde_json::to_string(&Metadata { config, dims })?;
    let ck = Checkpoint {
        stage: stage.to_string(),
        metadata,
        stores: stores.iter().map(|(n, s)| (n.to_string(), (*s).clone())).collect(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    ck.write_to(&mut w)?;
    use std::io::Write;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn load_checkpoint<C: DeserializeOwned>(path: &Path, stage: &str) -> Result<(C, [usize; 3], Checkpoint)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::read_from(&mut std::io::BufReader::new(file))?;
    if ck.stage != stage {
        return Err(Error::Invalid(format!("{} holds a {:?} checkpoint, expected {stage:?}", path.display(), ck.stage)));
    }
    let meta: Metadata<C> = serde_json::from_str(&ck.metadata)?;
    Ok((meta.config, meta.dims, ck))
}

pub(crate) fn image_tensor(img: &Image2D) -> Tensor {
    Tensor::new(vec![1, 1, img.height(), img.width()], img.values().to_vec())
}

pub(crate) fn volume_tensor(v: &Volume3D) -> Tensor {
    let (d, h, w) = v.dims();
    Tensor::new(vec![1, 1, d, h, w], v.values().to_vec())
}

pub(crate) fn tensor_volume(t: &Tensor) -> Result<Volume3D> {
    let s = t.shape();
    if s.len() != 5 || s[0] != 1 || s[1] != 1 {
        return Err(Error::Shape(format!("expected a [1,1,D,H,W] tensor, got {s:?}")));
    }
    Volume3D::clamped(s[2], s[3], s[4], t.data().to_vec())
}

pub(crate) fn tensor_image(t: &Tensor) -> Result<Image2D> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(Error::Shape(format!("expected a [1,1,H,W] tensor, got {s:?}")));
    }
    Image2D::clamped(s[2], s[3], t.data().to_vec())
}

/// Standard normal noise volume for the given seed.
pub(crate) fn noise_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = crate::util::rng(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r))
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
