//! Datasets, loaders and class-incremental scenarios.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major `n × dim` features with one global class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl Partition {
    pub fn new(features: Vec<f32>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} values cannot form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { features, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows whose label is in `classes`, order preserved.
    pub fn select_classes(&self, classes: &[usize]) -> Partition {
        self.select(|label| classes.contains(&label))
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Partition {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if keep(l) {
                features.extend_from_slice(self.row(i));
                labels.push(l);
            }
        }
        Partition {
            features,
            labels,
            dim: self.dim,
        }
    }

    /// Gather rows by index into an `n × dim` tensor.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| S::of(v as f64)));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), self.dim], data)?, labels))
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        Ok(self.batch(&idx)?.0)
    }
}

/// Train/test partitions over a shared feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: Partition,
    pub test: Partition,
    pub class_count: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, train: Partition, test: Partition, class_count: usize) -> Result<Self> {
        if train.dim != test.dim {
            return Err(Error::Data(format!(
                "train width {} differs from test width {}",
                train.dim, test.dim
            )));
        }
        if let Some(&l) = train.labels.iter().chain(&test.labels).find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {l} outside [0, {class_count})")));
        }
        Ok(Self {
            name: name.into(),
            feature_dim: train.dim,
            train,
            test,
            class_count,
        })
    }

    /// Class count inferred as one past the largest label.
    pub fn from_partitions(name: impl Into<String>, train: Partition, test: Partition) -> Result<Self> {
        let classes = train
            .labels
            .iter()
            .chain(&test.labels)
            .max()
            .map_or(0, |&m| m + 1);
        Self::new(name, train, test, classes)
    }
}

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parse an IDX image file (magic 0x803) into `count × rows·cols` pixels
/// scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let magic = read_u32_be(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!("idx images: bad magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4, "idx images")? as usize;
    let rows = read_u32_be(bytes, 8, "idx images")? as usize;
    let cols = read_u32_be(bytes, 12, "idx images")? as usize;
    let dim = rows * cols;
    let payload = &bytes[16..];
    if dim == 0 || payload.len() < count * dim {
        return Err(Error::Data(format!(
            "idx images: truncated payload ({} of {} bytes)",
            payload.len(),
            count * dim
        )));
    }
    let pixels = payload[..count * dim].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((pixels, count, dim))
}

/// Parse an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!("idx labels: bad magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4, "idx labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Data("idx labels: truncated payload".into()));
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Partition> {
    let (features, count, dim) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::Data(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    Partition::new(features, labels, dim)
}

/// Load `train-*-idx?-ubyte` and `t10k-*-idx?-ubyte` from one directory.
pub fn load_idx_dir(dir: &Path, name: &str) -> Result<Dataset> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Dataset::from_partitions(name, train, test)
}

/// Read a headed CSV. Every column other than `label_column` is a feature;
/// values are returned as written (see [`Standardizer`]).
pub fn load_csv(path: &Path, label_column: &str) -> Result<Partition> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Data(format!("{}: no column named {label_column:?}", path.display())))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Data(format!("{}: no feature columns", path.display())));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), row + 1)))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} columns, expected {}",
                path.display(),
                row + 1,
                record.len(),
                headers.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if col == label_idx {
                let label = cell.parse::<usize>().map_err(|_| {
                    Error::Data(format!("{}: row {}: label {cell:?} is not a class id", path.display(), row + 1))
                })?;
                labels.push(label);
            } else {
                let v = cell.parse::<f32>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!(
                        "{}: row {} column {:?}: {cell:?} is not numeric",
                        path.display(),
                        row + 1,
                        &headers[col]
                    ))
                })?;
                features.push(v);
            }
        }
    }
    Partition::new(features, labels, dim)
}

/// Write a partition in the format [`load_csv`] reads: features `f0..`, label last.
pub fn write_csv(path: &Path, partition: &Partition, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..partition.dim).map(|i| format!("f{i}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for i in 0..partition.len() {
        let mut rec: Vec<String> = partition.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(partition.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-feature z-score. Deviations below `1e-8` are replaced by 1, so
/// constant features map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(partition: &Partition) -> Result<Self> {
        if partition.is_empty() {
            return Err(Error::Data("cannot fit standardization on no rows".into()));
        }
        let n = partition.len() as f64;
        let d = partition.dim;
        let mut mean = vec![0.0; d];
        for i in 0..partition.len() {
            for (m, &v) in mean.iter_mut().zip(partition.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..partition.len() {
            for ((s, &v), m) in var.iter_mut().zip(partition.row(i)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, partition: &mut Partition) -> Result<()> {
        if partition.dim != self.mean.len() {
            return Err(Error::Data("standardizer width mismatch".into()));
        }
        let d = partition.dim;
        for (j, v) in partition.features.iter_mut().enumerate() {
            let c = j % d;
            *v = ((*v as f64 - self.mean[c]) / self.std[c]) as f32;
        }
        Ok(())
    }
}

/// Ordered disjoint class sets; task `t` trains on `task_classes[t]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub dataset: String,
    pub task_classes: Vec<Vec<usize>>,
    pub class_order_seed: u64,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.task_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_classes.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.task_classes.iter().flatten().copied().collect()
    }

    /// Task whose class set contains `class`.
    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.task_classes.iter().position(|s| s.contains(&class))
    }

    /// Check disjointness, label range, and that every task has rows in both partitions.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Scenario("no tasks".into()));
        }
        let mut seen = BTreeSet::new();
        for (t, set) in self.task_classes.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Scenario(format!("task {t} has no classes")));
            }
            for &c in set {
                if c >= dataset.class_count {
                    return Err(Error::Scenario(format!("class {c} not in dataset")));
                }
                if !seen.insert(c) {
                    return Err(Error::Scenario(format!("class {c} appears in two tasks")));
                }
            }
            for (name, part) in [("train", &dataset.train), ("test", &dataset.test)] {
                if !part.labels.iter().any(|l| set.contains(l)) {
                    return Err(Error::Scenario(format!("task {t} has no {name} rows")));
                }
            }
        }
        Ok(())
    }

    /// Union of the first `tasks` tasks' classes as a single task.
    pub fn joint(&self, tasks: usize) -> Scenario {
        Scenario {
            dataset: self.dataset.clone(),
            task_classes: vec![self.task_classes[..tasks].concat()],
            class_order_seed: self.class_order_seed,
        }
    }
}

/// Shuffle class ids `0..class_count` (Fisher–Yates, class-order stream of
/// `seed`), keep the first `n_tasks · classes_per_task`, chunk in order.
pub fn make_scenario(dataset: &Dataset, n_tasks: usize, classes_per_task: usize, seed: u64) -> Result<Scenario> {
    if n_tasks == 0 || classes_per_task == 0 {
        return Err(Error::Scenario("need at least one task and one class per task".into()));
    }
    let needed = n_tasks * classes_per_task;
    if needed > dataset.class_count {
        return Err(Error::Scenario(format!(
            "{n_tasks} tasks × {classes_per_task} classes needs {needed} classes, dataset has {}",
            dataset.class_count
        )));
    }
    let mut order: Vec<usize> = (0..dataset.class_count).collect();
    SeededRng::new(seed, Stream::ClassOrder).shuffle(&mut order);
    let scenario = Scenario {
        dataset: dataset.name.clone(),
        task_classes: order[..needed].chunks(classes_per_task).map(<[usize]>::to_vec).collect(),
        class_order_seed: seed,
    };
    scenario.validate(dataset)?;
    Ok(scenario)
}

/// Fit z-scoring on the first task's training rows and apply it to both
/// partitions.
pub fn standardize_for_scenario(dataset: &mut Dataset, scenario: &Scenario) -> Result<Standardizer> {
    let first = scenario
        .task_classes
        .first()
        .ok_or_else(|| Error::Scenario("no tasks".into()))?;
    let st = Standardizer::fit(&dataset.train.select_classes(first))?;
    st.apply(&mut dataset.train)?;
    st.apply(&mut dataset.test)?;
    Ok(st)
}

const MEAN_PLACEMENT_RETRIES: usize = 1000;

/// Isotropic unit-variance Gaussian clusters, one per class, with centres
/// at pairwise distance ≥ `separation` (in units of σ). The first 80% of
/// each class's instances go to train, the rest to test.
pub fn synth_clusters(
    n_classes: usize,
    dim: usize,
    instances_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || dim == 0 || instances_per_class < 2 {
        return Err(Error::Data("synthetic data needs classes, a dimension and ≥ 2 instances per class".into()));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Data(format!("separation {separation} must be finite and ≥ 0")));
    }
    let mut rng = SeededRng::new(seed, Stream::Synthetic);
    let spread = 1.5 * separation / (2.0 * dim as f64).sqrt();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let mut placed = false;
        for _ in 0..MEAN_PLACEMENT_RETRIES {
            let cand: Vec<f64> = (0..dim).map(|_| spread * rng.normal()).collect();
            let ok = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() >= separation
            });
            if ok {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place class {class} at separation {separation} in {dim} dimensions"
            )));
        }
    }

    let n_train = (instances_per_class * 4) / 5;
    let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (class, mean) in means.iter().enumerate() {
        for i in 0..instances_per_class {
            let (xs, ys) = if i < n_train {
                (&mut tr_x, &mut tr_y)
            } else {
                (&mut te_x, &mut te_y)
            };
            xs.extend(mean.iter().map(|m| (m + rng.normal()) as f32));
            ys.push(class);
        }
    }
    Dataset::new(
        format!("synth-{n_classes}x{dim}-sep{separation}"),
        Partition::new(tr_x, tr_y, dim)?,
        Partition::new(te_x, te_y, dim)?,
        n_classes,
    )
}

/// Write raw IDX files (used by tests and tooling).
pub fn write_idx(images_path: &Path, labels_path: &Path, pixels: &[u8], rows: usize, cols: usize, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(images_path)?;
    for v in [IDX_IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    let mut f = fs::File::create(labels_path)?;
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_scaling_and_errors() {
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 1, 1, 3] {
            bytes.extend(v.to_be_bytes());
        }
        bytes.extend([0u8, 128, 255]);
        let (px, n, d) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, d), (1, 3));
        assert_eq!(px[2], 1.0);
        assert_eq!(px[0], 0.0);
        assert!(matches!(parse_idx_images(&[]), Err(Error::Data(m)) if m.contains("truncated")));
        assert!(parse_idx_images(&bytes[..18]).is_err());
        let mut bad = bytes.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Data(m)) if m.contains("magic")));
        assert!(parse_idx_labels(&bytes).is_err());
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (im, lb) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&im, &lb, &[1, 2, 3, 4], 2, 2, &[0]).unwrap();
        assert!(load_idx(&im, &lb).is_ok());
        // header says 2 labels, images header 2 but only one image of payload
        write_idx(&im, &lb, &[1, 2, 3, 4], 2, 2, &[0, 1]).unwrap();
        assert!(load_idx(&im, &lb).is_err());
    }

    #[test]
    fn csv_shape_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "x,y,label\n1,2,0\n3,4,1\n5,6,0\n").unwrap();
        let part = load_csv(&p, "label").unwrap();
        assert_eq!((part.len(), part.dim), (3, 2));
        assert_eq!(part.row(1), &[3.0, 4.0]);
        assert!(load_csv(&p, "class").is_err());
        fs::write(&p, "x,label\n1,0\nfoo,1\n").unwrap();
        assert!(matches!(load_csv(&p, "label"), Err(Error::Data(m)) if m.contains("not numeric")));
        fs::write(&p, "x,label\n1,0\n2,1,3\n").unwrap();
        assert!(load_csv(&p, "label").is_err());
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let part = Partition::new(vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0], vec![0, 0, 0], 2).unwrap();
        let st = Standardizer::fit(&part).unwrap();
        let mut p = part.clone();
        st.apply(&mut p).unwrap();
        assert_eq!([p.row(0)[0], p.row(1)[0], p.row(2)[0]], [0.0, 0.0, 0.0]);
        assert!((p.row(0)[1] + 1.2247449).abs() < 1e-6);
    }

    #[test]
    fn scenario_partitions_all_ten_classes() {
        let ds = synth_clusters(10, 2, 5, 1.0, 0).unwrap();
        let s = make_scenario(&ds, 5, 2, 42).unwrap();
        assert_eq!(s.len(), 5);
        let mut all = s.classes();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, make_scenario(&ds, 5, 2, 42).unwrap());
        assert_ne!(s, make_scenario(&ds, 5, 2, 43).unwrap());
    }

    #[test]
    fn scenario_leaves_extra_class_out() {
        let ds = synth_clusters(19, 2, 5, 0.5, 0).unwrap();
        let s = make_scenario(&ds, 9, 2, 1).unwrap();
        assert_eq!(s.classes().len(), 18);
        assert!(make_scenario(&ds, 10, 2, 1).is_err());
    }

    #[test]
    fn synthetic_zero_separation_and_infeasible() {
        let ds = synth_clusters(3, 4, 10, 0.0, 5).unwrap();
        assert_eq!(ds.train.len(), 24);
        assert_eq!(ds.test.len(), 6);
        assert!(synth_clusters(10, 1, 10, 10.0, 0).is_err());
        assert_eq!(ds, synth_clusters(3, 4, 10, 0.0, 5).unwrap());
    }
}
