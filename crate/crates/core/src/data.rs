//! Labelled image datasets: the CIFAR-10 binary format and a synthetic
//! teacher-student task.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AlfError, Result};
use crate::ops;
use crate::tensor::{Activation, ConvGeometry, Layout, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, C]` samples.
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.dims()[0] != labels.len() {
            return Err(AlfError::Dataset(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(AlfError::LabelOutOfRange { label: l, classes });
        }
        Ok(Self {
            images,
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

    /// Per-sample dims `[H, W, C]`.
    pub fn sample_dims(&self) -> [usize; 3] {
        let [_, h, w, c] = self.images.dims();
        [h, w, c]
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4<f32>, Vec<usize>) {
        let [h, w, c] = self.sample_dims();
        let stride = h * w * c;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let images = Tensor4::from_vec([indices.len(), h, w, c], data, Layout::Nhwc).expect("batch dims");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Contiguous slice `[start, end)` as a batch.
    pub fn range(&self, start: usize, end: usize) -> (Tensor4<f32>, Vec<usize>) {
        let idx: Vec<usize> = (start..end).collect();
        self.batch(&idx)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

pub const CIFAR10_RECORD_BYTES: usize = 3073;
const CIFAR10_SIDE: usize = 32;
const CIFAR10_PLANE: usize = CIFAR10_SIDE * CIFAR10_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decodes CIFAR-10 binary records (label byte + channel-planar 3×32×32
/// pixels) into NHWC samples scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(AlfError::Dataset(format!(
            "CIFAR-10 data of {} bytes is not a multiple of {CIFAR10_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3 * CIFAR10_PLANE);
    for (r, record) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label > 9 {
            return Err(AlfError::Dataset(format!("record {r}: label byte {label} > 9")));
        }
        labels.push(label);
        let planes = &record[1..];
        for p in 0..CIFAR10_PLANE {
            for c in 0..3 {
                pixels.push(planes[c * CIFAR10_PLANE + p] as f32 / 255.0);
            }
        }
    }
    let images = Tensor4::from_vec([n, CIFAR10_SIDE, CIFAR10_SIDE, 3], pixels, Layout::Nhwc)?;
    Dataset::new(images, labels, 10)
}

/// Loads a CIFAR-10 split. `path` is either one batch file or the
/// directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10(path: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        match split {
            Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![path.join("test_batch.bin")],
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        let chunk = fs::read(f).map_err(|e| AlfError::Dataset(format!("{}: {e}", f.display())))?;
        if chunk.len() % CIFAR10_RECORD_BYTES != 0 {
            return Err(AlfError::Dataset(format!(
                "{}: {} bytes is not a multiple of {CIFAR10_RECORD_BYTES}",
                f.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

/// Side length of the synthetic single-channel inputs.
pub const TEACHER_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherSpec {
    pub seed: u64,
    /// Output-channel rank of both filter banks.
    pub rank: usize,
    /// Channel width of both layers.
    pub width: usize,
    pub classes: usize,
    /// Inputs whose top-two teacher score gap falls below this quantile of
    /// the gap distribution are redrawn. 0 keeps every draw.
    pub margin_quantile: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rank: 4,
            width: 16,
            classes: 4,
            margin_quantile: DEFAULT_MARGIN_QUANTILE,
        }
    }
}

pub const DEFAULT_MARGIN_QUANTILE: f64 = 0.25;

/// Draws used to calibrate the margin threshold.
const CALIBRATION_SAMPLES: usize = 4096;

/// Frozen two-layer convolutional labeller for `8×8×1` inputs:
/// `conv3×3 → relu → conv3×3 → spatial mean`, both convolutions unpadded, label = argmax over the first
/// `classes` channels. Both `3×3×Ci×width` banks are products of Gaussian
/// `(9·Ci)×rank` and `rank×width` factors, so viewed as matrices they have
/// rank exactly `rank` (almost surely).
///
/// The left factors are column-centred, which makes every output filter sum
/// to zero, and the first bank's filters are scaled to unit norm. Together
/// these remove the constant offset the relu would otherwise add to each
/// class score, so no class dominates.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    spec: TeacherSpec,
    conv1: Tensor4<f32>,
    conv2: Tensor4<f32>,
    geom: ConvGeometry,
    min_margin: f32,
}

/// Largest supported teacher rank: centring removes one dimension from the
/// nine rows of the first bank.
pub const MAX_TEACHER_RANK: usize = 8;

fn low_rank_bank(rng: &mut ChaCha8Rng, ci: usize, co: usize, rank: usize, unit_filters: bool) -> Tensor4<f32> {
    let rows = 9 * ci;
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let mut left: Vec<f64> = (0..rows * rank).map(|_| normal()).collect();
    let right: Vec<f64> = (0..rank * co).map(|_| normal()).collect();
    for r in 0..rank {
        let mean = (0..rows).map(|i| left[i * rank + r]).sum::<f64>() / rows as f64;
        for i in 0..rows {
            left[i * rank + r] -= mean;
        }
    }
    let mut bank = vec![0.0f64; rows * co];
    for i in 0..rows {
        for j in 0..co {
            bank[i * co + j] = (0..rank).map(|r| left[i * rank + r] * right[r * co + j]).sum();
        }
    }
    let col_scale: Vec<f64> = (0..co)
        .map(|j| {
            if unit_filters {
                1.0 / (0..rows).map(|i| bank[i * co + j].powi(2)).sum::<f64>().sqrt()
            } else {
                1.0 / ((rank * rows) as f64).sqrt()
            }
        })
        .collect();
    let data = bank
        .iter()
        .enumerate()
        .map(|(idx, v)| (v * col_scale[idx % co]) as f32)
        .collect();
    Tensor4::from_vec([3, 3, ci, co], data, Layout::Kkio).expect("bank dims")
}

impl SyntheticTeacher {
    pub fn new(spec: TeacherSpec) -> Result<Self> {
        let TeacherSpec {
            seed,
            rank,
            width,
            classes,
            ..
        } = spec;
        if rank == 0 || rank > width.min(MAX_TEACHER_RANK) {
            return Err(AlfError::Dataset(format!(
                "teacher rank {rank} must lie in 1..={}",
                width.min(MAX_TEACHER_RANK)
            )));
        }
        if classes < 2 || classes > width {
            return Err(AlfError::Dataset(format!("teacher classes {classes} must lie in 2..={width}")));
        }
        if !(0.0..1.0).contains(&spec.margin_quantile) {
            return Err(AlfError::Dataset(format!(
                "margin quantile {} must lie in [0, 1)",
                spec.margin_quantile
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = low_rank_bank(&mut rng, 1, width, rank, true);
        let conv2 = low_rank_bank(&mut rng, width, width, rank, false);
        let mut teacher = Self {
            spec,
            conv1,
            conv2,
            geom: ConvGeometry::new(3, 1, 0)?,
            min_margin: 0.0,
        };
        if spec.margin_quantile > 0.0 {
            // stream 0 is reserved for calibration; `generate` uses stream + 1
            rng.set_stream(0);
            let x = standard_normal_images(&mut rng, CALIBRATION_SAMPLES);
            let scores = teacher.logits(&x)?;
            let mut gaps: Vec<f32> = scores.data().chunks_exact(classes).map(top_two_gap).collect();
            gaps.sort_by(f32::total_cmp);
            teacher.min_margin = gaps[(spec.margin_quantile * gaps.len() as f64) as usize];
        }
        Ok(teacher)
    }

    pub fn spec(&self) -> TeacherSpec {
        self.spec
    }

    /// Smallest top-two score gap `generate` accepts.
    pub fn min_margin(&self) -> f32 {
        self.min_margin
    }

    pub fn filter_banks(&self) -> [&Tensor4<f32>; 2] {
        [&self.conv1, &self.conv2]
    }

    /// Teacher scores `[N,1,1,classes]`.
    pub fn logits(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let h = ops::activation(&ops::conv2d_fast(x, &self.conv1, &self.geom)?, Activation::Relu);
        let h = ops::conv2d_fast(&h, &self.conv2, &self.geom)?;
        let pooled = ops::global_avg_pool(&h);
        let keep: Vec<usize> = (0..self.spec.classes).collect();
        pooled.select_channels(&keep)
    }

    pub fn label(&self, x: &Tensor4<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Draws `n` standard-normal inputs from the given random stream and
    /// labels them, redrawing inputs that fall below the margin threshold.
    /// Distinct streams give disjoint samples.
    pub fn generate(&self, n: usize, stream: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream + 1);
        let per = TEACHER_SIDE * TEACHER_SIDE;
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        while labels.len() < n {
            let want = (n - labels.len()).max(64);
            let x = standard_normal_images(&mut rng, want);
            let scores = self.logits(&x)?;
            let k = self.spec.classes;
            for (i, row) in scores.data().chunks_exact(k).enumerate() {
                if labels.len() == n {
                    break;
                }
                if top_two_gap(row) >= self.min_margin {
                    data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
                    labels.push(argmax(row));
                }
            }
        }
        let images = Tensor4::from_vec([n, TEACHER_SIDE, TEACHER_SIDE, 1], data, Layout::Nhwc)?;
        Dataset::new(images, labels, self.spec.classes)
    }
}

fn standard_normal_images(rng: &mut ChaCha8Rng, n: usize) -> Tensor4<f32> {
    let data: Vec<f32> = (0..n * TEACHER_SIDE * TEACHER_SIDE)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Tensor4::from_vec([n, TEACHER_SIDE, TEACHER_SIDE, 1], data, Layout::Nhwc).expect("image dims")
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn top_two_gap(row: &[f32]) -> f32 {
    let (mut first, mut second) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &v in row {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second
}

/// `n` samples labelled by the default-width teacher of the given seed and rank.
pub fn synth_teacher(seed: u64, n: usize, rank: usize) -> Result<Dataset> {
    SyntheticTeacher::new(TeacherSpec {
        seed,
        rank,
        ..TeacherSpec::default()
    })?
    .generate(n, 0)
}

/// Row-wise argmax of `[N,1,1,K]` scores; ties resolve to the lowest index.
pub fn argmax_rows(scores: &Tensor4<f32>) -> Vec<usize> {
    let k = scores.channels();
    scores
        .data()
        .chunks_exact(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
