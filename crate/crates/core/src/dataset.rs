//! Multi-task image datasets, wavelet design matrices and coefficient sets.
//!
//! On disk a dataset is a directory holding `manifest.json`, and for each task
//! `y_<id>.csv` (one outcome per line) and `images_<id>.bin` (the task's
//! images as little-endian f64, concatenated, each image row-major). See
//! `docs/FORMATS.md` for the byte layout.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::io::{format_column, parse_column, read_f64_le, write_atomic, write_f64_le, FORMAT_VERSION};
use crate::linalg;
use crate::wavelet::{dwt2_rows, ImageGrid, WaveletBasisSpec};

/// One data source: outcomes and observed images.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: usize,
    pub y: Array1<f64>,
    /// `n_m x p` matrix, row `i` is image `i` vectorized row-major.
    pub images: Array2<f64>,
}

impl TaskData {
    pub fn new(task_id: usize, y: Array1<f64>, images: Array2<f64>) -> Result<Self> {
        if y.is_empty() {
            return invalid(format!("task {task_id} has no samples"));
        }
        if images.nrows() != y.len() {
            return invalid(format!(
                "task {task_id}: {} outcomes but {} images",
                y.len(),
                images.nrows()
            ));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return invalid(format!("task {task_id}: outcome {i} is not finite"));
        }
        Ok(TaskData { task_id, y, images })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn image(&self, i: usize) -> ImageGrid {
        let p0 = (self.images.ncols() as f64).sqrt().round() as usize;
        ImageGrid::from_vec(p0, self.images.row(i).to_vec()).expect("validated image side")
    }

    /// Rows `idx` of this task.
    pub fn subset(&self, idx: &[usize]) -> TaskData {
        TaskData {
            task_id: self.task_id,
            y: self.y.select(Axis(0), idx),
            images: self.images.select(Axis(0), idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    pub tasks: Vec<TaskData>,
    pub spec: WaveletBasisSpec,
}

impl MultiTaskDataset {
    pub fn new(tasks: Vec<TaskData>, spec: WaveletBasisSpec) -> Result<Self> {
        spec.validate()?;
        if tasks.is_empty() {
            return invalid("dataset needs at least one task");
        }
        let p = spec.p();
        for (k, t) in tasks.iter().enumerate() {
            if t.images.ncols() != p {
                return invalid(format!(
                    "task {} (index {k}) has images of {} pixels; basis side {} needs {p}",
                    t.task_id,
                    t.images.ncols(),
                    spec.p0
                ));
            }
            if let Some((i, _)) = t
                .images
                .outer_iter()
                .enumerate()
                .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
            {
                return invalid(format!("task {}: image {i} has non-finite pixels", t.task_id));
            }
            if tasks[..k].iter().any(|o| o.task_id == t.task_id) {
                return invalid(format!("duplicate task id {}", t.task_id));
            }
        }
        Ok(MultiTaskDataset { tasks, spec })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }
}

/// Stacked wavelet coefficients, one row per task (`M x p`). Column `j` is the
/// group of coefficient `j` across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet(pub Array2<f64>);

impl CoefficientSet {
    pub fn zeros(m: usize, p: usize) -> Self {
        CoefficientSet(Array2::zeros((m, p)))
    }

    pub fn num_tasks(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_groups(&self) -> usize {
        self.0.ncols()
    }

    pub fn task(&self, m: usize) -> ArrayView1<'_, f64> {
        self.0.row(m)
    }

    pub fn group(&self, j: usize) -> ArrayView1<'_, f64> {
        self.0.column(j)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Groups with at least one nonzero entry.
    pub fn active_groups(&self) -> Vec<usize> {
        (0..self.num_groups())
            .filter(|&j| self.group(j).iter().any(|v| *v != 0.0))
            .collect()
    }

    pub fn frobenius_distance(&self, other: &CoefficientSet) -> f64 {
        (&self.0 - &other.0).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-task wavelet design matrices `W_m` (rows `w_mi = B^T z_mi`) with
/// mean-centered outcomes.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub w: Vec<Array2<f64>>,
    pub y_centered: Vec<Array1<f64>>,
    pub y_means: Vec<f64>,
    pub task_ids: Vec<usize>,
    pub spec: WaveletBasisSpec,
}

impl DesignMatrices {
    pub fn num_tasks(&self) -> usize {
        self.w.len()
    }

    pub fn p(&self) -> usize {
        self.spec.p()
    }

    pub fn n(&self, m: usize) -> usize {
        self.w[m].nrows()
    }

    pub fn task_index(&self, task_id: usize) -> Result<usize> {
        self.task_ids
            .iter()
            .position(|&t| t == task_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task id {task_id}")))
    }

    /// Builds a design from already-transformed rows.
    pub fn from_parts(w: Vec<Array2<f64>>, y: Vec<Array1<f64>>, task_ids: Vec<usize>, spec: WaveletBasisSpec) -> Result<Self> {
        if w.len() != y.len() || w.len() != task_ids.len() || w.is_empty() {
            return invalid("design parts have inconsistent task counts");
        }
        let mut y_centered = Vec::with_capacity(y.len());
        let mut y_means = Vec::with_capacity(y.len());
        for (k, (wm, ym)) in w.iter().zip(&y).enumerate() {
            if wm.nrows() != ym.len() || wm.ncols() != spec.p() || ym.is_empty() {
                return invalid(format!("task index {k}: design shape {:?} vs {} outcomes", wm.dim(), ym.len()));
            }
            let mean = ym.sum() / ym.len() as f64;
            y_centered.push(ym.mapv(|v| v - mean));
            y_means.push(mean);
        }
        Ok(DesignMatrices {
            w,
            y_centered,
            y_means,
            task_ids,
            spec,
        })
    }

    /// Restricts every task to the given rows (outcomes are re-centered).
    pub fn subset(&self, rows: &[Vec<usize>]) -> Result<Self> {
        let w = self
            .w
            .iter()
            .zip(rows)
            .map(|(wm, idx)| wm.select(Axis(0), idx))
            .collect();
        let y = self
            .y_centered
            .iter()
            .zip(&self.y_means)
            .zip(rows)
            .map(|((yc, mean), idx)| yc.select(Axis(0), idx).mapv(|v| v + mean))
            .collect();
        DesignMatrices::from_parts(w, y, self.task_ids.clone(), self.spec)
    }

    /// Raw (uncentered) outcomes of task index `m`.
    pub fn y_raw(&self, m: usize) -> Array1<f64> {
        self.y_centered[m].mapv(|v| v + self.y_means[m])
    }
}

/// Wavelet-transforms every image and centers outcomes per task.
pub fn build_design(ds: &MultiTaskDataset) -> Result<DesignMatrices> {
    let w = ds
        .tasks
        .iter()
        .map(|t| dwt2_rows(t.images.view(), &ds.spec))
        .collect::<Result<Vec<_>>>()?;
    let y = ds.tasks.iter().map(|t| t.y.clone()).collect();
    DesignMatrices::from_parts(w, y, ds.task_ids(), ds.spec)
}

/// `ybar_m + W_m eta_m` for the task with id `task_id`.
pub fn predict(coeffs: &CoefficientSet, design: &DesignMatrices, task_id: usize) -> Result<Array1<f64>> {
    let m = design.task_index(task_id)?;
    if coeffs.num_tasks() != design.num_tasks() || coeffs.num_groups() != design.p() {
        return invalid(format!(
            "coefficients are {:?}, design has {} tasks and p = {}",
            coeffs.0.dim(),
            design.num_tasks(),
            design.p()
        ));
    }
    Ok(predict_rows(design.w[m].view(), coeffs.task(m), design.y_means[m]))
}

/// `mean + W eta` for arbitrary wavelet-domain rows.
pub fn predict_rows(w: ArrayView2<f64>, eta: ArrayView1<f64>, mean: f64) -> Array1<f64> {
    let support: Vec<usize> = eta
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, _)| j)
        .collect();
    let mut out = if support.len() * 2 < eta.len() {
        linalg::mat_vec_sparse(w, eta, &support)
    } else {
        linalg::mat_vec(w, eta)
    };
    out.mapv_inplace(|v| v + mean);
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_tasks: usize,
    pub task_ids: Vec<usize>,
    pub n: Vec<usize>,
    pub image_side: usize,
    pub spec: WaveletBasisSpec,
    pub endianness: String,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

pub fn y_file(task_id: usize) -> String {
    format!("y_{task_id}.csv")
}

pub fn images_file(task_id: usize) -> String {
    format!("images_{task_id}.bin")
}

pub fn save_dataset(ds: &MultiTaskDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for t in &ds.tasks {
        write_atomic(&dir.join(y_file(t.task_id)), format_column(t.y.iter().copied()).as_bytes())?;
        write_f64_le(&dir.join(images_file(t.task_id)), t.images.iter().copied())?;
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        num_tasks: ds.num_tasks(),
        task_ids: ds.task_ids(),
        n: ds.tasks.iter().map(|t| t.n()).collect(),
        image_side: ds.spec.p0,
        spec: ds.spec,
        endianness: "little".into(),
    };
    write_atomic(&dir.join(DATASET_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        location: path.display().to_string(),
        message: format!("malformed header: {e}"),
    })?;
    let bad = |message: String| Error::Format {
        location: path.display().to_string(),
        message,
    };
    if m.endianness != "little" {
        return Err(bad(format!("unsupported endianness '{}'", m.endianness)));
    }
    if m.task_ids.len() != m.num_tasks || m.n.len() != m.num_tasks {
        return Err(bad(format!(
            "num_tasks = {} but {} task ids and {} sample sizes listed",
            m.num_tasks,
            m.task_ids.len(),
            m.n.len()
        )));
    }
    if m.image_side != m.spec.p0 {
        return Err(bad(format!(
            "image side {} differs from basis side {}",
            m.image_side, m.spec.p0
        )));
    }
    m.spec.validate().map_err(|e| bad(e.to_string()))?;
    Ok(m)
}

fn read_images(dir: &Path, task_id: usize, n: usize, p: usize) -> Result<Array2<f64>> {
    let path = dir.join(images_file(task_id));
    let data = read_f64_le(&path, n * p)?;
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            location: format!("task {task_id} record {}", k / p),
            message: format!("non-finite pixel at byte offset {}", k * 8),
        });
    }
    Ok(Array2::from_shape_vec((n, p), data).unwrap())
}

pub fn load_dataset(dir: &Path) -> Result<MultiTaskDataset> {
    let m = read_manifest(dir)?;
    let p = m.spec.p();
    let mut tasks = Vec::with_capacity(m.num_tasks);
    for (&task_id, &n) in m.task_ids.iter().zip(&m.n) {
        let y_path = dir.join(y_file(task_id));
        let text = fs::read_to_string(&y_path).map_err(io_err(&y_path))?;
        let y = parse_column(&text, &format!("task {task_id} {}", y_path.display()))?;
        if y.len() != n {
            return Err(Error::Format {
                location: format!("task {task_id}"),
                message: format!("manifest lists {n} samples but {} outcomes found", y.len()),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                location: format!("task {task_id} record {i}"),
                message: "non-finite outcome".into(),
            });
        }
        let images = read_images(dir, task_id, n, p)?;
        tasks.push(TaskData::new(task_id, Array1::from(y), images)?);
    }
    MultiTaskDataset::new(tasks, m.spec)
}

/// Loads only the image stacks (outcome files are not required). Used for
/// noise-replicate directories.
pub fn load_image_groups(dir: &Path) -> Result<(Vec<Array2<f64>>, WaveletBasisSpec)> {
    let m = read_manifest(dir)?;
    let p = m.spec.p();
    let groups = m
        .task_ids
        .iter()
        .zip(&m.n)
        .map(|(&id, &n)| read_images(dir, id, n, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((groups, m.spec))
}
