//! Datasets, Dirichlet partitioning, and label statistics.
//!
//! Images are stored as `f32` in `[-1, 1]` (matching the generators' tanh
//! range) and widened to `f64` batch tensors on demand. `SYNTH_TOY` is fully
//! procedural so the test suites never download anything; the real datasets
//! load from a documented on-disk layout under a data root.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::Array4;
use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfdgError, Result};

// ---------------------------------------------------------------------------
// datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    SynthToy,
    Fmnist,
    Cifar10,
    Svhn,
    Cinic10,
    Cifar100,
    TinyImagenet,
    Food101,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::SynthToy => "synth_toy",
            DatasetName::Fmnist => "fmnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Svhn => "svhn",
            DatasetName::Cinic10 => "cinic10",
            DatasetName::Cifar100 => "cifar100",
            DatasetName::TinyImagenet => "tiny_imagenet",
            DatasetName::Food101 => "food101",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "synth_toy" => DatasetName::SynthToy,
            "fmnist" => DatasetName::Fmnist,
            "cifar10" => DatasetName::Cifar10,
            "svhn" => DatasetName::Svhn,
            "cinic10" => DatasetName::Cinic10,
            "cifar100" => DatasetName::Cifar100,
            "tiny_imagenet" => DatasetName::TinyImagenet,
            "food101" => DatasetName::Food101,
            other => return Err(DfdgError::Dataset(format!("unknown dataset `{other}`"))),
        })
    }

    /// (channels, height, width) after canonical preprocessing.
    pub fn image_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetName::SynthToy => (1, 16, 16),
            DatasetName::Fmnist => (1, 32, 32),
            DatasetName::Cifar10 | DatasetName::Svhn | DatasetName::Cinic10 | DatasetName::Cifar100 => (3, 32, 32),
            DatasetName::TinyImagenet | DatasetName::Food101 => (3, 64, 64),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetName::SynthToy | DatasetName::Fmnist | DatasetName::Cifar10 | DatasetName::Svhn | DatasetName::Cinic10 => 10,
            DatasetName::Cifar100 => 100,
            DatasetName::TinyImagenet => 200,
            DatasetName::Food101 => 101,
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An in-memory dataset: normalized train and test splits.
pub struct DatasetHandle {
    pub name: DatasetName,
    pub image_shape: (usize, usize, usize),
    pub num_classes: usize,
    train_images: Vec<f32>,
    train_labels: Vec<u16>,
    test_images: Vec<f32>,
    test_labels: Vec<u16>,
}

impl DatasetHandle {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    pub fn train_labels(&self) -> &[u16] {
        &self.train_labels
    }

    pub fn test_labels(&self) -> &[u16] {
        &self.test_labels
    }

    fn pixels(&self) -> usize {
        let (c, h, w) = self.image_shape;
        c * h * w
    }

    /// Assemble a train-split batch as an f64 NCHW tensor plus labels.
    pub fn train_batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        batch_from(&self.train_images, &self.train_labels, self.image_shape, indices)
    }

    pub fn test_batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        batch_from(&self.test_images, &self.test_labels, self.image_shape, indices)
    }

    /// Keep only the first `n_train`/`n_test` examples (desk-scale profiles).
    pub fn subset(mut self, n_train: Option<usize>, n_test: Option<usize>) -> Self {
        if let Some(n) = n_train {
            let n = n.min(self.train_len());
            self.train_images.truncate(n * self.pixels());
            self.train_labels.truncate(n);
        }
        if let Some(n) = n_test {
            let n = n.min(self.test_len());
            self.test_images.truncate(n * self.pixels());
            self.test_labels.truncate(n);
        }
        self
    }
}

fn batch_from(
    images: &[f32],
    labels: &[u16],
    shape: (usize, usize, usize),
    indices: &[usize],
) -> (Array4<f64>, Vec<usize>) {
    let (c, h, w) = shape;
    let px = c * h * w;
    let mut out = Array4::<f64>::zeros((indices.len(), c, h, w));
    let mut ys = Vec::with_capacity(indices.len());
    for (bi, &idx) in indices.iter().enumerate() {
        let src = &images[idx * px..(idx + 1) * px];
        let mut k = 0;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[bi, ch, i, j]] = src[k] as f64;
                    k += 1;
                }
            }
        }
        ys.push(labels[idx] as usize);
    }
    (out, ys)
}

/// Load a dataset. `SYNTH_TOY` needs no files; everything else reads from
/// `data_root/<dataset>/` in the layouts described in the README.
pub fn load_dataset(name: DatasetName, data_root: Option<&Path>) -> Result<DatasetHandle> {
    if name == DatasetName::SynthToy {
        return Ok(synth_toy());
    }
    let data_root = data_root.ok_or_else(|| {
        DfdgError::Config(format!("dataset `{}` needs a data_root", name.as_str()))
    })?;
    match name {
        DatasetName::SynthToy => unreachable!("handled above"),
        DatasetName::Fmnist => load_idx_dataset(name, &data_root.join("fmnist")),
        DatasetName::Cifar10 => load_cifar10(&data_root.join("cifar10")),
        DatasetName::Cifar100 => load_cifar100(&data_root.join("cifar100")),
        DatasetName::Svhn => load_raw_planar(name, &data_root.join("svhn")),
        DatasetName::Cinic10 | DatasetName::TinyImagenet | DatasetName::Food101 => {
            load_image_folder(name, &data_root.join(name.as_str()))
        }
    }
}

// ---- SYNTH_TOY ------------------------------------------------------------

/// Ten oriented-bar classes on a 16x16 canvas: class `k` is an anisotropic
/// Gaussian bar rotated by `k * 18` degrees, drawn at a jittered center with
/// length, width, and amplitude variation plus pixel noise. Position carries
/// no class signal, so classifiers must learn oriented filters; that makes
/// naive weight averaging across independently trained models degrade sharply
/// while each individual model (and their logit ensemble) stays strong.
/// Fixed internal seeds make the dataset bit-identical across runs.
pub fn synth_toy() -> DatasetHandle {
    let (c, h, w) = DatasetName::SynthToy.image_shape();
    debug_assert_eq!(c, 1);
    let render = |n_per_class: usize, seed: u64| -> (Vec<f32>, Vec<u16>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = n_per_class * 10;
        let mut images = Vec::with_capacity(n * h * w);
        let mut labels = Vec::with_capacity(n);
        for idx in 0..n {
            let class = (idx % 10) as u16;
            // Bars are symmetric under 180-degree rotation, so ten classes
            // tile the half circle in 18-degree steps.
            let theta = std::f64::consts::PI * class as f64 / 10.0;
            let (sin_t, cos_t) = theta.sin_cos();
            let cx = 7.5 + rng.gen_range(-2.5..2.5);
            let cy = 7.5 + rng.gen_range(-2.5..2.5);
            let sigma_long = 3.2 + rng.gen_range(0.0..0.8);
            let sigma_short = 0.9 + rng.gen_range(0.0..0.3);
            let amplitude = 0.85 + rng.gen_range(0.0..0.3);
            for i in 0..h {
                for j in 0..w {
                    let dx = j as f64 - cx;
                    let dy = i as f64 - cy;
                    let along = dx * cos_t + dy * sin_t;
                    let across = -dx * sin_t + dy * cos_t;
                    let bar = (-along * along / (2.0 * sigma_long * sigma_long)
                        - across * across / (2.0 * sigma_short * sigma_short))
                        .exp();
                    let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.15;
                    let v = (2.0 * amplitude * bar - 1.0 + noise).clamp(-1.0, 1.0);
                    images.push(v as f32);
                }
            }
            labels.push(class);
        }
        (images, labels)
    };
    let (train_images, train_labels) = render(200, 0x70_01);
    let (test_images, test_labels) = render(50, 0x70_02);
    DatasetHandle {
        name: DatasetName::SynthToy,
        image_shape: (c, h, w),
        num_classes: 10,
        train_images,
        train_labels,
        test_images,
        test_labels,
    }
}

// ---- real dataset loaders -------------------------------------------------

fn read_maybe_gz(path_plain: &Path) -> Result<Vec<u8>> {
    let gz = path_plain.with_extension(match path_plain.extension() {
        Some(e) => format!("{}.gz", e.to_string_lossy()),
        None => "gz".to_string(),
    });
    if path_plain.exists() {
        fs::read(path_plain).map_err(|e| DfdgError::io(path_plain, e))
    } else if gz.exists() {
        let raw = fs::read(&gz).map_err(|e| DfdgError::io(&gz, e))?;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| DfdgError::io(&gz, e))?;
        Ok(out)
    } else {
        Err(DfdgError::MissingData(path_plain.to_path_buf()))
    }
}

/// Parse an IDX image file (magic 0x803) into (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = bytes;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| DfdgError::Dataset("idx: truncated magic".into()))?;
    if magic != 0x0000_0803 {
        return Err(DfdgError::Dataset(format!("idx: bad image magic {magic:#x}")));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| DfdgError::Dataset("idx: truncated count".into()))? as usize;
    let rows = r.read_u32::<BigEndian>().map_err(|_| DfdgError::Dataset("idx: truncated rows".into()))? as usize;
    let cols = r.read_u32::<BigEndian>().map_err(|_| DfdgError::Dataset("idx: truncated cols".into()))? as usize;
    if rows == 0 || cols == 0 || rows > 4096 || cols > 4096 || n > 10_000_000 {
        return Err(DfdgError::Dataset(format!("idx: implausible dims {n}x{rows}x{cols}")));
    }
    let want = n
        .checked_mul(rows * cols)
        .ok_or_else(|| DfdgError::Dataset("idx: size overflow".into()))?;
    if r.len() < want {
        return Err(DfdgError::Dataset(format!("idx: payload {} < expected {}", r.len(), want)));
    }
    Ok((n, rows, cols, r[..want].to_vec()))
}

/// Parse an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = bytes;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| DfdgError::Dataset("idx: truncated magic".into()))?;
    if magic != 0x0000_0801 {
        return Err(DfdgError::Dataset(format!("idx: bad label magic {magic:#x}")));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| DfdgError::Dataset("idx: truncated count".into()))? as usize;
    if n > 10_000_000 {
        return Err(DfdgError::Dataset(format!("idx: implausible count {n}")));
    }
    if r.len() < n {
        return Err(DfdgError::Dataset(format!("idx: payload {} < expected {n}", r.len())));
    }
    Ok(r[..n].to_vec())
}

/// FMNIST in the standard idx layout (optionally gzipped), bilinearly resized
/// to 32x32 per the canonical preprocessing.
fn load_idx_dataset(name: DatasetName, dir: &Path) -> Result<DatasetHandle> {
    let (c, h, w) = name.image_shape();
    debug_assert_eq!(c, 1);
    let split = |images_file: &str, labels_file: &str| -> Result<(Vec<f32>, Vec<u16>)> {
        let (n, rows, cols, px) = parse_idx_images(&read_maybe_gz(&dir.join(images_file))?)?;
        let raw_labels = parse_idx_labels(&read_maybe_gz(&dir.join(labels_file))?)?;
        if raw_labels.len() != n {
            return Err(DfdgError::Dataset(format!(
                "idx: {n} images but {} labels in {dir:?}",
                raw_labels.len()
            )));
        }
        let mut images = Vec::with_capacity(n * h * w);
        for i in 0..n {
            let img = image::GrayImage::from_raw(cols as u32, rows as u32, px[i * rows * cols..(i + 1) * rows * cols].to_vec())
                .ok_or_else(|| DfdgError::Dataset("idx: bad image buffer".into()))?;
            let resized = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
            images.extend(resized.as_raw().iter().map(|&p| p as f32 / 127.5 - 1.0));
        }
        Ok((images, raw_labels.into_iter().map(u16::from).collect()))
    };
    let (train_images, train_labels) = split("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let (test_images, test_labels) = split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok(DatasetHandle {
        name,
        image_shape: (c, h, w),
        num_classes: name.num_classes(),
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

fn cifar_records(bytes: &[u8], label_bytes: usize, images: &mut Vec<f32>, labels: &mut Vec<u16>) -> Result<()> {
    const PX: usize = 3 * 32 * 32;
    let rec = label_bytes + PX;
    if bytes.len() % rec != 0 {
        return Err(DfdgError::Dataset(format!("cifar: file size {} not a multiple of {rec}", bytes.len())));
    }
    for chunk in bytes.chunks_exact(rec) {
        // coarse label (cifar-100) is ignored; the fine label is last
        labels.push(chunk[label_bytes - 1] as u16);
        images.extend(chunk[label_bytes..].iter().map(|&p| p as f32 / 127.5 - 1.0));
    }
    Ok(())
}

fn load_cifar10(dir: &Path) -> Result<DatasetHandle> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        cifar_records(&fs::read(&p).map_err(|_| DfdgError::MissingData(p.clone()))?, 1, &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    let p = dir.join("test_batch.bin");
    cifar_records(&fs::read(&p).map_err(|_| DfdgError::MissingData(p.clone()))?, 1, &mut test_images, &mut test_labels)?;
    Ok(DatasetHandle {
        name: DatasetName::Cifar10,
        image_shape: (3, 32, 32),
        num_classes: 10,
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

fn load_cifar100(dir: &Path) -> Result<DatasetHandle> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    let p = dir.join("train.bin");
    cifar_records(&fs::read(&p).map_err(|_| DfdgError::MissingData(p.clone()))?, 2, &mut train_images, &mut train_labels)?;
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    let p = dir.join("test.bin");
    cifar_records(&fs::read(&p).map_err(|_| DfdgError::MissingData(p.clone()))?, 2, &mut test_images, &mut test_labels)?;
    Ok(DatasetHandle {
        name: DatasetName::Cifar100,
        image_shape: (3, 32, 32),
        num_classes: 100,
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

/// SVHN pre-converted out of its .mat container: `{split}_images.bin` holding
/// raw u8 CHW-planar pixels and `{split}_labels.bin` holding one u8 label
/// (0-9) per example.
fn load_raw_planar(name: DatasetName, dir: &Path) -> Result<DatasetHandle> {
    let (c, h, w) = name.image_shape();
    let px = c * h * w;
    let split = |prefix: &str| -> Result<(Vec<f32>, Vec<u16>)> {
        let ip = dir.join(format!("{prefix}_images.bin"));
        let lp = dir.join(format!("{prefix}_labels.bin"));
        let ib = fs::read(&ip).map_err(|_| DfdgError::MissingData(ip.clone()))?;
        let lb = fs::read(&lp).map_err(|_| DfdgError::MissingData(lp.clone()))?;
        if ib.len() != lb.len() * px {
            return Err(DfdgError::Dataset(format!(
                "svhn: {} pixel bytes inconsistent with {} labels",
                ib.len(),
                lb.len()
            )));
        }
        Ok((
            ib.iter().map(|&p| p as f32 / 127.5 - 1.0).collect(),
            lb.into_iter().map(u16::from).collect(),
        ))
    };
    let (train_images, train_labels) = split("train")?;
    let (test_images, test_labels) = split("test")?;
    Ok(DatasetHandle {
        name,
        image_shape: (c, h, w),
        num_classes: name.num_classes(),
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

/// `root/{train,test}/<class_dir>/<image files>`; class directories sorted
/// lexicographically define the label ids.
fn load_image_folder(name: DatasetName, root: &Path) -> Result<DatasetHandle> {
    let (c, h, w) = name.image_shape();
    let split = |sub: &str| -> Result<(Vec<f32>, Vec<u16>)> {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(DfdgError::MissingData(dir));
        }
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| DfdgError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.len() != name.num_classes() {
            return Err(DfdgError::Dataset(format!(
                "{name}: expected {} class dirs under {dir:?}, found {}",
                name.num_classes(),
                class_dirs.len()
            )));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (label, cd) in class_dirs.iter().enumerate() {
            let mut files: Vec<PathBuf> = walkdir::WalkDir::new(cd)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .collect();
            files.sort();
            for f in files {
                let img = image::open(&f)?.to_rgb8();
                let resized = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
                // HWC -> CHW planar
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            images.push(resized.get_pixel(j as u32, i as u32)[ch] as f32 / 127.5 - 1.0);
                        }
                    }
                }
                labels.push(label as u16);
            }
        }
        Ok((images, labels))
    };
    let (train_images, train_labels) = split("train")?;
    let (test_images, test_labels) = split("test")?;
    Ok(DatasetHandle {
        name,
        image_shape: (c, h, w),
        num_classes: name.num_classes(),
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

// ---------------------------------------------------------------------------
// partitioning

/// A Dirichlet split of the training set across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedFederation {
    pub dataset: DatasetName,
    pub train_len: usize,
    pub num_clients: usize,
    pub omega: f64,
    pub seed: u64,
    /// How many times the Dirichlet draw was re-seeded (seed + offset) before
    /// every client was nonempty.
    pub repair_offset: u64,
    pub client_indices: Vec<Vec<usize>>,
}

/// Per-client label counts; row i is client i's counter over classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCounter {
    pub counts: Vec<Vec<u64>>,
}

impl LabelCounter {
    pub fn zeros(num_clients: usize, num_classes: usize) -> Self {
        LabelCounter { counts: vec![vec![0; num_classes]; num_clients] }
    }

    pub fn num_clients(&self) -> usize {
        self.counts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.first().map_or(0, |r| r.len())
    }

    /// n^y: total count of class y across clients.
    pub fn class_total(&self, y: usize) -> u64 {
        self.counts.iter().map(|r| r[y]).sum()
    }
}

/// Split `dataset`'s training set over `num_clients` clients: one Dir(omega)
/// proportion vector per class, applied to that class's shuffled index list
/// with largest-remainder rounding so counts are exact. If a client ends up
/// empty the whole draw is retried with seed+1, seed+2, ... and the offset is
/// recorded.
pub fn dirichlet_partition(
    dataset: &DatasetHandle,
    num_clients: usize,
    omega: f64,
    seed: u64,
) -> Result<PartitionedFederation> {
    if num_clients == 0 {
        return Err(DfdgError::Config("dirichlet_partition: need at least one client".into()));
    }
    if !(omega > 0.0) {
        return Err(DfdgError::Config(format!("dirichlet_partition: omega must be positive, got {omega}")));
    }
    let labels = dataset.train_labels();
    for offset in 0..10_000u64 {
        let assignment = dirichlet_draw(labels, dataset.num_classes, num_clients, omega, seed.wrapping_add(offset));
        if assignment.iter().all(|c| !c.is_empty()) {
            return Ok(PartitionedFederation {
                dataset: dataset.name,
                train_len: labels.len(),
                num_clients,
                omega,
                seed,
                repair_offset: offset,
                client_indices: assignment,
            });
        }
    }
    Err(DfdgError::Partition(
        "dirichlet_partition: could not produce nonempty clients after 10000 re-draws".into(),
    ))
}

fn dirichlet_draw(labels: &[u16], num_classes: usize, num_clients: usize, omega: f64, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gamma = rand_distr::Gamma::new(omega, 1.0).expect("omega checked positive");
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        // Dir(omega * 1_N) via normalized Gamma draws.
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            // pathological draw (all gammas underflowed); give everything to client 0
            props = vec![0.0; num_clients];
            props[0] = 1.0;
        } else {
            for p in &mut props {
                *p /= total;
            }
        }
        // largest-remainder split of idx according to props
        let n = idx.len();
        let targets: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..num_clients).collect();
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for k in 0..(n - assigned) {
            counts[order[k % num_clients]] += 1;
        }
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            clients[client].extend_from_slice(&idx[cursor..cursor + count]);
            cursor += count;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    clients
}

/// Ground-truth per-client class histogram, for validating label counters.
pub fn true_label_histogram(federation: &PartitionedFederation, dataset: &DatasetHandle) -> LabelCounter {
    let mut lc = LabelCounter::zeros(federation.num_clients, dataset.num_classes);
    for (i, indices) in federation.client_indices.iter().enumerate() {
        for &idx in indices {
            lc.counts[i][dataset.train_labels()[idx] as usize] += 1;
        }
    }
    lc
}

// ---------------------------------------------------------------------------
// partition file format

const PARTITION_HEADER: &str = "dfdg-partition v1";
/// Upper bounds that keep a hostile file from forcing huge allocations before
/// validation completes.
const MAX_CLIENTS: usize = 100_000;
const MAX_TRAIN_LEN: usize = 100_000_000;

/// Serialize a federation to the versioned text format.
pub fn format_partition(f: &PartitionedFederation) -> String {
    let mut out = String::new();
    out.push_str(PARTITION_HEADER);
    out.push('\n');
    out.push_str(&format!("dataset {}\n", f.dataset));
    out.push_str(&format!("train_len {}\n", f.train_len));
    out.push_str(&format!("clients {}\n", f.num_clients));
    out.push_str(&format!("omega {}\n", f.omega));
    out.push_str(&format!("seed {}\n", f.seed));
    out.push_str(&format!("repair_offset {}\n", f.repair_offset));
    for (i, idx) in f.client_indices.iter().enumerate() {
        out.push_str(&format!("client {} {}\n", i, idx.len()));
        let mut line = String::new();
        for (k, v) in idx.iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            line.push_str(&v.to_string());
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Parse and fully validate the partition text format: header fields, client
/// count/length consistency, index range, and exact disjoint cover of
/// `[0, train_len)`.
pub fn parse_partition(text: &str) -> Result<PartitionedFederation> {
    let perr = |m: String| DfdgError::Partition(m);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr("empty file".into()))?;
    if header != PARTITION_HEADER {
        return Err(perr(format!("bad header `{header}`")));
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| perr(format!("missing `{name}` line")))?;
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| perr(format!("malformed `{name}` line: `{line}`")))?;
        if k != name {
            return Err(perr(format!("expected `{name}`, found `{k}`")));
        }
        Ok(v.to_string())
    };
    let dataset = DatasetName::parse(&field("dataset")?)?;
    let train_len: usize = field("train_len")?
        .parse()
        .map_err(|_| perr("train_len not an integer".into()))?;
    let num_clients: usize = field("clients")?
        .parse()
        .map_err(|_| perr("clients not an integer".into()))?;
    let omega: f64 = field("omega")?.parse().map_err(|_| perr("omega not a number".into()))?;
    let seed: u64 = field("seed")?.parse().map_err(|_| perr("seed not an integer".into()))?;
    let repair_offset: u64 = field("repair_offset")?
        .parse()
        .map_err(|_| perr("repair_offset not an integer".into()))?;
    if num_clients == 0 || num_clients > MAX_CLIENTS {
        return Err(perr(format!("client count {num_clients} out of range")));
    }
    if train_len > MAX_TRAIN_LEN {
        return Err(perr(format!("train_len {train_len} out of range")));
    }
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(perr(format!("omega {omega} must be positive and finite")));
    }
    let mut client_indices = Vec::with_capacity(num_clients.min(4096));
    let mut seen = vec![false; train_len];
    let mut covered = 0usize;
    for i in 0..num_clients {
        let head = lines.next().ok_or_else(|| perr(format!("missing header for client {i}")))?;
        let mut parts = head.split(' ');
        if parts.next() != Some("client") {
            return Err(perr(format!("expected `client` line, got `{head}`")));
        }
        let id: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| perr(format!("bad client id in `{head}`")))?;
        if id != i {
            return Err(perr(format!("client lines out of order: expected {i}, got {id}")));
        }
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| perr(format!("bad count in `{head}`")))?;
        if parts.next().is_some() {
            return Err(perr(format!("trailing tokens in `{head}`")));
        }
        if count > train_len {
            return Err(perr(format!("client {i} claims {count} > train_len {train_len} indices")));
        }
        let body = lines.next().ok_or_else(|| perr(format!("missing index line for client {i}")))?;
        let mut idx = Vec::with_capacity(count.min(65_536));
        if !body.is_empty() {
            for tok in body.split(' ') {
                let v: usize = tok
                    .parse()
                    .map_err(|_| perr(format!("client {i}: bad index `{tok}`")))?;
                if v >= train_len {
                    return Err(perr(format!("client {i}: index {v} out of range {train_len}")));
                }
                if seen[v] {
                    return Err(perr(format!("index {v} assigned twice")));
                }
                seen[v] = true;
                covered += 1;
                idx.push(v);
            }
        }
        if idx.len() != count {
            return Err(perr(format!("client {i}: header says {count} indices, line has {}", idx.len())));
        }
        if idx.is_empty() {
            return Err(perr(format!("client {i} is empty")));
        }
        client_indices.push(idx);
    }
    if lines.next().is_some() {
        return Err(perr("trailing content after last client".into()));
    }
    if covered != train_len {
        return Err(perr(format!("indices cover {covered} of {train_len} examples")));
    }
    Ok(PartitionedFederation {
        dataset,
        train_len,
        num_clients,
        omega,
        seed,
        repair_offset,
        client_indices,
    })
}

pub fn write_partition(f: &PartitionedFederation, path: &Path) -> Result<()> {
    fs::write(path, format_partition(f)).map_err(|e| DfdgError::io(path, e))
}

pub fn read_partition(path: &Path) -> Result<PartitionedFederation> {
    let text = fs::read_to_string(path).map_err(|e| DfdgError::io(path, e))?;
    parse_partition(&text)
}

/// Check that a parsed partition matches the dataset it will be used with.
pub fn validate_partition_for(f: &PartitionedFederation, dataset: &DatasetHandle) -> Result<()> {
    if f.dataset != dataset.name {
        return Err(DfdgError::Partition(format!(
            "partition is for {}, dataset is {}",
            f.dataset, dataset.name
        )));
    }
    if f.train_len != dataset.train_len() {
        return Err(DfdgError::Partition(format!(
            "partition covers {} examples, dataset has {}",
            f.train_len,
            dataset.train_len()
        )));
    }
    Ok(())
}
