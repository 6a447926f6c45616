//! Dataset ingestion: IDX-format image/label files, CIFAR-10 binary
//! batches, and seeded synthetic Gaussian clusters.

use anyhow::{bail, Context};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rome_models::data::Dataset;
use rome_nn::Tensor;
use std::io::Read;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read) -> anyhow::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).context("truncated IDX header")?;
    Ok(u32::from_be_bytes(buf))
}

/// Parses an IDX image/label file pair: big-endian magic 0x803 for images
/// (count x rows x cols of unsigned bytes, scaled to [0, 1]) and 0x801 for
/// labels. Image and label counts must match.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> anyhow::Result<Dataset> {
    let mut images = std::io::BufReader::new(
        std::fs::File::open(images_path.as_ref())
            .with_context(|| format!("opening {}", images_path.as_ref().display()))?,
    );
    let magic = read_u32_be(&mut images)?;
    if magic != IDX_IMAGES_MAGIC {
        bail!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}");
    }
    let count = read_u32_be(&mut images)? as usize;
    let rows = read_u32_be(&mut images)? as usize;
    let cols = read_u32_be(&mut images)? as usize;
    if rows == 0 || cols == 0 {
        bail!("degenerate image dimensions {rows}x{cols}");
    }
    let mut pixels = vec![0u8; count * rows * cols];
    images
        .read_exact(&mut pixels)
        .context("truncated image payload")?;
    let mut trailing = [0u8; 1];
    if images.read(&mut trailing)? != 0 {
        bail!("trailing bytes after image payload");
    }

    let mut labels = std::io::BufReader::new(
        std::fs::File::open(labels_path.as_ref())
            .with_context(|| format!("opening {}", labels_path.as_ref().display()))?,
    );
    let magic = read_u32_be(&mut labels)?;
    if magic != IDX_LABELS_MAGIC {
        bail!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}");
    }
    let label_count = read_u32_be(&mut labels)? as usize;
    if label_count != count {
        bail!("{count} images but {label_count} labels");
    }
    let mut label_bytes = vec![0u8; label_count];
    labels
        .read_exact(&mut label_bytes)
        .context("truncated label payload")?;

    let keep = limit.unwrap_or(count).min(count);
    let data: Vec<f64> = pixels[..keep * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let inputs = Tensor::new(vec![keep, 1, rows, cols], data)?;
    let labels: Vec<usize> = label_bytes[..keep].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        bail!("label {bad} out of the 0..=9 range");
    }
    Ok(Dataset::new(inputs, labels, 10)?)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary batches: records of one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn load_cifar10(
    batches: &[impl AsRef<Path>],
    limit: Option<usize>,
) -> anyhow::Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batches {
        let bytes = std::fs::read(path.as_ref())
            .with_context(|| format!("reading {}", path.as_ref().display()))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            bail!(
                "{} is not a whole number of CIFAR records",
                path.as_ref().display()
            );
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                bail!("label {label} out of the 0..=9 range");
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
            if let Some(limit) = limit {
                if labels.len() >= limit {
                    break;
                }
            }
        }
        if let Some(limit) = limit {
            if labels.len() >= limit {
                break;
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        bail!("no CIFAR records loaded");
    }
    let inputs = Tensor::new(vec![n, 3, 32, 32], data)?;
    Ok(Dataset::new(inputs, labels, 10)?)
}

/// Synthetic Gaussian clusters with controllable separation: class means
/// sit on a ring inside a two-dimensional subspace spanned by smooth
/// low-frequency spatial patterns, with unit-variance isotropic noise and
/// balanced labels.
///
/// `margin` is half the minimum pairwise mean separation in noise units:
/// the two-class Bayes error across the closest pair is `Phi(-margin)`,
/// so margins of 4 or more make a linear oracle essentially perfect. The
/// low-dimensional class manifold mirrors natural image data, where one
/// shared direction can cross many decision boundaries at once.
pub fn synth_dataset(
    classes: usize,
    shape: &[usize],
    margin: f64,
    count: usize,
    rng: &mut impl Rng,
) -> anyhow::Result<Dataset> {
    if margin <= 0.0 {
        bail!("margin must be positive");
    }
    if count == 0 {
        bail!("empty dataset requested");
    }
    if classes < 2 {
        bail!("need at least two classes");
    }
    let dim: usize = shape.iter().product();
    if dim < 2 {
        bail!("dimension {dim} cannot host the class subspace");
    }
    let (h, w) = match shape {
        [_, h, w] => (*h, *w),
        _ => (1, dim),
    };

    // Two orthonormal smooth basis patterns via Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2);
    while basis.len() < 2 {
        let mut v = smooth_pattern(dim, h, w, rng);
        for prev in &basis {
            let proj: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev.iter()) {
                *x -= proj * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }

    // Ring radius making the adjacent-class chord equal to 2 * margin.
    let radius = margin / (std::f64::consts::PI / classes as f64).sin();
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let theta = std::f64::consts::TAU * c as f64 / classes as f64;
            (0..dim)
                .map(|j| radius * (theta.cos() * basis[0][j] + theta.sin() * basis[1][j]))
                .collect()
        })
        .collect();

    let mut data = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        labels.push(label);
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(rng);
            data.push(means[label][j] + noise);
        }
    }
    let mut full_shape = vec![count];
    full_shape.extend_from_slice(shape);
    Ok(Dataset::new(Tensor::new(full_shape, data)?, labels, classes)?)
}

/// Smooth candidate pattern: a random mixture of low-frequency cosines
/// over the spatial grid, tiled across channels.
fn smooth_pattern(dim: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut plane = vec![0.0; h * w];
    for _ in 0..4 {
        let fy = rng.gen_range(0..3) as f64;
        let fx = rng.gen_range(0..3) as f64;
        let phase_y: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase_x: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.5..1.0);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] += amp
                    * (std::f64::consts::TAU * fy * y as f64 / h as f64 + phase_y).cos()
                    * (std::f64::consts::TAU * fx * x as f64 / w as f64 + phase_x).cos();
            }
        }
    }
    let mut v = Vec::with_capacity(dim);
    while v.len() < dim {
        let take = (dim - v.len()).min(plane.len());
        v.extend_from_slice(&plane[..take]);
    }
    v
}

/// Nearest-centroid linear oracle: fits class means on `train` and reports
/// accuracy on `test`. The optimal linear rule for isotropic clusters.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let dim = train.inputs.row_len();
    let mut means = vec![vec![0.0; dim]; train.classes];
    let mut counts = vec![0usize; train.classes];
    for i in 0..train.len() {
        counts[train.labels[i]] += 1;
        for (m, v) in means[train.labels[i]].iter_mut().zip(train.inputs.row(i)) {
            *m += v;
        }
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        if count > 0 {
            mean.iter_mut().for_each(|v| *v /= count as f64);
        }
    }
    let mut hits = 0usize;
    for i in 0..test.len() {
        let row = test.inputs.row(i);
        let mut best = (f64::INFINITY, 0usize);
        for (c, mean) in means.iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(mean.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == test.labels[i] {
            hits += 1;
        }
    }
    hits as f64 / test.len() as f64
}
