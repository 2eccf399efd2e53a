use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::train::BatchSource;
use crate::net::{Batch, Tensor};

use super::DatasetFormat;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Labelled images with pixel values in `[0, 1]`, stored sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(channels, height, width)` of one sample.
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let k = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(&self.inputs[i * k..(i + 1) * k]);
        }
        let [c, h, w] = self.shape;
        Batch::new(
            Tensor::from_vec([indices.len(), c, h, w], data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Reads a labelled dataset. `shape` and `num_classes` come from the
/// network the data will feed; mismatches are input errors.
pub fn load_dataset(
    format: DatasetFormat,
    path: &Path,
    labels: Option<&Path>,
    shape: [usize; 3],
    num_classes: usize,
) -> Result<Dataset> {
    match format {
        DatasetFormat::CsvLabeled => load_csv(path, shape, num_classes),
        DatasetFormat::IdxPair => {
            let labels = labels.ok_or_else(|| Error::config("dataset.labels", "idx_pair needs a label file"))?;
            let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
            parse_idx(&read(path)?, &read(labels)?, shape, num_classes)
        }
        DatasetFormat::Synthetic => Err(Error::config("dataset.format", "synthetic data is generated, not loaded")),
    }
}

fn load_csv(path: &Path, shape: [usize; 3], num_classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, shape, num_classes)
}

/// Header row with a `label` column; every other column is a pixel in
/// `[0, 255]`, row-major.
pub(crate) fn parse_csv<R: std::io::Read>(reader: R, shape: [usize; 3], num_classes: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let csv_err = |e: csv::Error| {
        let row = e.position().map_or_else(|| "header".to_string(), |p| format!("row {}", p.line()));
        Error::input(row, e.to_string())
    };
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::input("row 1", "no `label` column in header"))?;
    let pixels = headers.len() - 1;
    let want: usize = shape.iter().product();
    if pixels != want {
        return Err(Error::input(
            "row 1",
            format!("{pixels} pixel columns, network expects {want}"),
        ));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::input(format!("row {line}, column {}", j + 1), format!("`{field}` is not a number")))?;
            if j == label_col {
                if v.fract() != 0.0 || v < 0.0 || v >= num_classes as f64 {
                    return Err(Error::input(
                        format!("row {line}, column {}", j + 1),
                        format!("label {v} out of range for {num_classes} classes"),
                    ));
                }
                labels.push(v as usize);
            } else {
                if !(0.0..=255.0).contains(&v) {
                    return Err(Error::input(
                        format!("row {line}, column {}", j + 1),
                        format!("pixel {v} outside [0, 255]"),
                    ));
                }
                inputs.push(v / 255.0);
            }
        }
    }
    Ok(Dataset {
        shape,
        num_classes,
        inputs,
        labels,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::input(format!("byte {at}"), "file ends inside the header"))
}

/// Standard IDX pair: unsigned-byte images (`0x00000803`, count, rows,
/// cols) and labels (`0x00000801`, count), all big-endian.
pub(crate) fn parse_idx(images: &[u8], labels: &[u8], shape: [usize; 3], num_classes: usize) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::input("images byte 0", format!("magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::input("labels byte 0", format!("magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(images, 4)? as usize;
    let (rows, cols) = (be_u32(images, 8)? as usize, be_u32(images, 12)? as usize);
    if [1, rows, cols] != shape {
        return Err(Error::input(
            "images byte 8",
            format!("images are {rows}×{cols}, network expects {}×{}×{}", shape[0], shape[1], shape[2]),
        ));
    }
    let n_labels = be_u32(labels, 4)? as usize;
    if n_labels != n {
        return Err(Error::input("labels byte 4", format!("{n_labels} labels for {n} images")));
    }
    let body = &images[16..];
    if body.len() != n * rows * cols {
        return Err(Error::input(
            format!("images byte {}", 16 + body.len().min(n * rows * cols)),
            format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()),
        ));
    }
    let lab = &labels[8..];
    if lab.len() != n {
        return Err(Error::input(
            format!("labels byte {}", 8 + lab.len().min(n)),
            format!("expected {n} label bytes, found {}", lab.len()),
        ));
    }
    if let Some(i) = lab.iter().position(|&l| l as usize >= num_classes) {
        return Err(Error::input(
            format!("labels byte {}", 8 + i),
            format!("label {} out of range for {num_classes} classes", lab[i]),
        ));
    }
    Ok(Dataset {
        shape,
        num_classes,
        inputs: body.iter().map(|&b| f64::from(b) / 255.0).collect(),
        labels: lab.iter().map(|&l| l as usize).collect(),
    })
}

/// Two-class `8×8` images: class 0 has a bright horizontal bar, class 1 a
/// vertical one, at a random offset over a noisy background.
pub fn synthetic_bars(samples: usize, seed: u64) -> Dataset {
    let side = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.15).expect("valid normal");
    let mut inputs = Vec::with_capacity(samples * side * side);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % 2;
        let at = rng.random_range(1..side - 1);
        let (lo, hi) = {
            let a = rng.random_range(0..3);
            (a, side - rng.random_range(0..3))
        };
        for y in 0..side {
            for x in 0..side {
                let (line, along) = if label == 0 { (y, x) } else { (x, y) };
                let base = if line == at && (lo..hi).contains(&along) { 0.8 } else { 0.2 };
                let v: f64 = base + noise.sample(&mut rng);
                inputs.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset {
        shape: [1, side, side],
        num_classes: 2,
        inputs,
        labels,
    }
}

/// Mini-batches over a [`Dataset`], reshuffled each epoch from
/// `(seed, epoch)`. The final short batch is kept.
#[derive(Clone, Debug)]
pub struct Loader {
    pub data: Dataset,
    pub batch_size: usize,
    pub seed: u64,
}

impl Loader {
    pub fn new(data: Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("dataset.batch_size", "must be at least 1"));
        }
        if data.is_empty() {
            return Err(Error::input("row 1", "dataset has no samples"));
        }
        Ok(Loader { data, batch_size, seed })
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        idx.shuffle(&mut rng);
        idx
    }
}

impl BatchSource for Loader {
    fn epoch_batches(&self, epoch: usize) -> Result<Vec<Batch>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(|c| self.data.batch(c))
            .collect()
    }

    fn eval_batches(&self) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        idx.chunks(self.batch_size).map(|c| self.data.batch(c)).collect()
    }
}
