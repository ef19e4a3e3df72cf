//! Dataset loading: a synthetic teacher task, numeric CSV, and IDX image
//! pairs, plus a deterministic digit-image generator that writes IDX files.
//!
//! Every loader returns examples in a deterministic order so runs replay
//! exactly. CSV features are standardized per column; IDX pixels are scaled
//! to `[0, 1]`.

use crate::config::DatasetSource;
use crate::error::{CliError, CliResult};
use sketchfed::fed::{ClientDataset, DistributionTag};
use sketchfed::nn::{Example, FcSpec, Features, Label, NetworkSpec, NetworkState};
use sketchfed::numerics::Vector;
use sketchfed::seeding::child_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::path::Path;

pub fn load_dataset(source: &DatasetSource) -> CliResult<ClientDataset> {
    match source {
        DatasetSource::TeacherFc { dim, count, seed } => teacher_fc(*dim, *count, *seed),
        DatasetSource::Csv(path) => load_csv(path),
        DatasetSource::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Standard-normal inputs labeled by a fixed randomly initialized one-hidden-
/// layer network: `y = teacher(x)`, a scalar regression target.
fn teacher_fc(dim: usize, count: usize, seed: u64) -> CliResult<ClientDataset> {
    if dim == 0 || count == 0 {
        return Err(CliError::Config("teacher-fc needs d >= 1 and n >= 1".into()));
    }
    let spec = NetworkSpec::Fc(FcSpec { input_dim: dim, hidden_dims: vec![dim], output_dim: 1 });
    let teacher = NetworkState::init(spec, child_seed(seed, &[1]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[2]));
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let x = Vector::from_vec((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect());
        let features = Features::Flat(x);
        let (pred, _) = sketchfed::nn::forward(&teacher, &features)?;
        examples.push(Example { x: features, y: Label::Scalar(pred.get(0)) });
    }
    Ok(ClientDataset::new(examples, DistributionTag::Full)?)
}

/// Numeric CSV, no header row, label in the final column. Features are
/// standardized to zero mean and unit variance per column (constant columns
/// stay at zero). Labels become classes when every value is a nonnegative
/// integer, scalars otherwise.
fn load_csv(path: &Path) -> CliResult<ClientDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 2 {
            return Err(CliError::Config(format!(
                "{}: line {line}: need at least one feature and a label",
                path.display()
            )));
        }
        if let Some(prev) = rows.first() {
            if record.len() != prev.len() {
                return Err(CliError::Config(format!(
                    "{}: line {line}: {} fields where earlier rows have {}",
                    path.display(),
                    record.len(),
                    prev.len()
                )));
            }
        }
        let mut row = Vec::with_capacity(record.len());
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Config(format!(
                    "{}: line {line}: field {} (`{field}`) is not numeric",
                    path.display(),
                    col + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::Config(format!(
                    "{}: line {line}: field {} is not finite",
                    path.display(),
                    col + 1
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{}: no data rows", path.display())));
    }
    let width = rows[0].len() - 1;
    let n = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for row in &rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; width];
    for row in &rows {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let class_labels = rows
        .iter()
        .all(|r| {
            let y = r[width];
            y >= 0.0 && y.fract() == 0.0
        });
    let examples = rows
        .into_iter()
        .map(|row| {
            let features: Vec<f64> = row[..width]
                .iter()
                .zip(mean.iter().zip(&std))
                .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
                .collect();
            let y = row[width];
            Example {
                x: Features::Flat(Vector::from_vec(features)),
                y: if class_labels { Label::Class(y as usize) } else { Label::Scalar(y) },
            }
        })
        .collect();
    Ok(ClientDataset::new(examples, DistributionTag::Full)?)
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str, path: &Path) -> CliResult<u32> {
    let slice: [u8; 4] = bytes
        .get(at..at + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| {
            CliError::Config(format!("{}: truncated before {what}", path.display()))
        })?;
    Ok(u32::from_be_bytes(slice))
}

/// Big-endian IDX image/label pair. Pixels land in `[0, 1]` as flat vectors
/// of length rows*cols; labels become classes.
fn load_idx(images: &Path, labels: &Path) -> CliResult<ClientDataset> {
    let img_bytes = std::fs::read(images)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", images.display())))?;
    let lbl_bytes = std::fs::read(labels)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", labels.display())))?;
    let magic = be_u32(&img_bytes, 0, "magic", images)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(CliError::Config(format!(
            "{}: magic {magic:#010x} is not an IDX image file",
            images.display()
        )));
    }
    let count = be_u32(&img_bytes, 4, "count", images)? as usize;
    let rows = be_u32(&img_bytes, 8, "rows", images)? as usize;
    let cols = be_u32(&img_bytes, 12, "cols", images)? as usize;
    let pixels = rows * cols;
    if img_bytes.len() != 16 + count * pixels {
        return Err(CliError::Config(format!(
            "{}: {} bytes where {count} images of {pixels} pixels need {}",
            images.display(),
            img_bytes.len(),
            16 + count * pixels
        )));
    }
    let lmagic = be_u32(&lbl_bytes, 0, "magic", labels)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(CliError::Config(format!(
            "{}: magic {lmagic:#010x} is not an IDX label file",
            labels.display()
        )));
    }
    let lcount = be_u32(&lbl_bytes, 4, "count", labels)? as usize;
    if lbl_bytes.len() != 8 + lcount {
        return Err(CliError::Config(format!("{}: truncated label data", labels.display())));
    }
    if lcount != count {
        return Err(CliError::Config(format!(
            "{count} images but {lcount} labels ({}, {})",
            images.display(),
            labels.display()
        )));
    }
    if count == 0 {
        return Err(CliError::Config(format!("{}: no images", images.display())));
    }
    let examples = (0..count)
        .map(|i| {
            let start = 16 + i * pixels;
            let data = img_bytes[start..start + pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            Example {
                x: Features::Flat(Vector::from_vec(data)),
                y: Label::Class(lbl_bytes[8 + i] as usize),
            }
        })
        .collect();
    Ok(ClientDataset::new(examples, DistributionTag::Full)?)
}

const DIGIT_SIDE: usize = 28;

fn digit_prototypes(seed: u64) -> Vec<Vec<f64>> {
    let side = DIGIT_SIDE;
    let mut prototypes = Vec::with_capacity(10);
    for class in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[1, class]));
        let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(7.0..21.0),
                    rng.random_range(7.0..21.0),
                    rng.random_range(1.5..3.5),
                    rng.random_range(0.7..1.0),
                )
            })
            .collect();
        let mut img = vec![0.0f64; side * side];
        for y in 0..side {
            for x in 0..side {
                let mut v = 0.0;
                for &(cx, cy, sigma, amp) in &blobs {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                img[y * side + x] = v.min(1.0);
            }
        }
        prototypes.push(img);
    }
    prototypes
}

/// Renders examples `start .. start + count` of the digit stream into IDX
/// image/label byte buffers. Example `i` is the class `i % 10` prototype
/// under a seeded shift and pixel noise.
fn render_digit_range(
    prototypes: &[Vec<f64>],
    start: usize,
    count: usize,
    seed: u64,
) -> (Vec<u8>, Vec<u8>) {
    let side = DIGIT_SIDE;
    let mut img_out = Vec::with_capacity(16 + count * side * side);
    img_out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img_out.extend_from_slice(&(count as u32).to_be_bytes());
    img_out.extend_from_slice(&(side as u32).to_be_bytes());
    img_out.extend_from_slice(&(side as u32).to_be_bytes());
    let mut lbl_out = Vec::with_capacity(8 + count);
    lbl_out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl_out.extend_from_slice(&(count as u32).to_be_bytes());

    for i in start..start + count {
        let class = i % 10;
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[2, i as u64]));
        let dx = rng.random_range(-2i64..=2);
        let dy = rng.random_range(-2i64..=2);
        let proto = &prototypes[class];
        for y in 0..side {
            for x in 0..side {
                let sx = x as i64 - dx;
                let sy = y as i64 - dy;
                let base = if (0..side as i64).contains(&sx) && (0..side as i64).contains(&sy) {
                    proto[sy as usize * side + sx as usize]
                } else {
                    0.0
                };
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = (base + 0.08 * noise).clamp(0.0, 1.0);
                img_out.push((v * 255.0).round() as u8);
            }
        }
        lbl_out.push(class as u8);
    }
    (img_out, lbl_out)
}

/// Writes a deterministic synthetic digit dataset as an IDX image/label
/// pair. Each of the ten classes is a fixed arrangement of Gaussian blobs;
/// examples are class prototypes under small shifts and pixel noise, in
/// round-robin class order.
pub fn generate_digits(
    images_path: &Path,
    labels_path: &Path,
    count: usize,
    seed: u64,
) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::Config("digit generator needs count >= 1".into()));
    }
    let prototypes = digit_prototypes(seed);
    let (img_out, lbl_out) = render_digit_range(&prototypes, 0, count, seed);
    write_file(images_path, &img_out)?;
    write_file(labels_path, &lbl_out)?;
    Ok(())
}

/// Writes a train/test pair drawn from one digit distribution: both splits
/// share the class prototypes, and the test examples continue the example
/// stream where the training examples stop, so the draws are disjoint.
#[allow(clippy::too_many_arguments)]
pub fn generate_digit_split(
    train_images: &Path,
    train_labels: &Path,
    train_count: usize,
    test_images: &Path,
    test_labels: &Path,
    test_count: usize,
    seed: u64,
) -> CliResult<()> {
    if train_count == 0 || test_count == 0 {
        return Err(CliError::Config("digit split needs both counts >= 1".into()));
    }
    let prototypes = digit_prototypes(seed);
    let (img_out, lbl_out) = render_digit_range(&prototypes, 0, train_count, seed);
    write_file(train_images, &img_out)?;
    write_file(train_labels, &lbl_out)?;
    let (img_out, lbl_out) = render_digit_range(&prototypes, train_count, test_count, seed);
    write_file(test_images, &img_out)?;
    write_file(test_labels, &lbl_out)?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
