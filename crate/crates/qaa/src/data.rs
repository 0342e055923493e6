//! Datasets: synthetic class-conditional blobs, the IDX binary reader, and
//! the "QAAD" dataset container used to persist evaluation sets and
//! adversarial payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Where a dataset came from, for reproducibility manifests.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic {
        classes: usize,
        n: usize,
        height: usize,
        width: usize,
        sigma: f32,
        seed: u64,
    },
    Idx {
        images_sha256: String,
        labels_sha256: String,
    },
    Adversarial {
        substitute: String,
        attack: String,
    },
}

/// A labeled image set with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, c, h, w]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 || s[0] != self.labels.len() || s[0] == 0 {
            return Err(Error::Dataset(format!(
                "images shape {:?} inconsistent with {} labels",
                s,
                self.labels.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Dataset(format!(
                "label {} out of range for {} classes",
                y, self.num_classes
            )));
        }
        if self.images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dataset("image values outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Gathers the examples at `indices` into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), c, h, w], data).expect("stride arithmetic"),
            labels,
        )
    }

    /// The first `n` examples as one batch.
    pub fn head(&self, n: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&idx)
    }

    /// SHA-256 over image bits and labels, hex-encoded.
    pub fn payload_hash(&self) -> String {
        let mut h = Sha256::new();
        for &v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Per-class mean pattern of the synthetic set: a spatial Gaussian bump at
/// a class-specific position on a ring, on a constant base level.
///
/// The geometry constants are tuned so that adjacent classes overlap enough
/// to leave room for adversarial perturbations at desk-scale budgets while a
/// linear probe still separates the classes at the default noise level.
pub fn class_pattern(classes: usize, class: usize, height: usize, width: usize) -> Vec<f32> {
    let side = height.min(width) as f64;
    let radius = 0.26 * side;
    let bump_sigma = 0.26 * side;
    let amp = 0.45;
    let base = 0.2;
    let phase = 0.39;
    let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64 + phase;
    let cx = (width as f64 - 1.0) / 2.0 + radius * angle.cos();
    let cy = (height as f64 - 1.0) / 2.0 + radius * angle.sin();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let v = base + amp * (-d2 / (2.0 * bump_sigma * bump_sigma)).exp();
            out.push(v as f32);
        }
    }
    out
}

/// Synthesizes a class-conditional Gaussian blob dataset.
///
/// Each example is its class mean pattern plus iid pixel noise
/// `N(0, sigma^2)`, clamped to `[0, 1]`; labels cycle round-robin so the
/// classes stay balanced. Fully determined by the seed. The set is linearly
/// separable by construction for `sigma` below roughly 0.25; the harness
/// default is 0.1.
pub fn synth_dataset(
    classes: usize,
    n: usize,
    height: usize,
    width: usize,
    sigma: f32,
    seed: u64,
    split: &str,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least 1 example".into()));
    }
    let patterns: Vec<Vec<f32>> = (0..classes)
        .map(|c| class_pattern(classes, c, height, width))
        .collect();
    let mut rng = Rng::seed(seed);
    let mut data = Vec::with_capacity(n * height * width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        labels.push(y);
        for &m in &patterns[y] {
            let v = m + sigma * rng.normal() as f32;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let ds = Dataset {
        images: Tensor::from_vec(&[n, 1, height, width], data)?,
        labels,
        num_classes: classes,
        split: split.to_string(),
        provenance: Provenance::Synthetic {
            classes,
            n,
            height,
            width,
            sigma,
            seed,
        },
    };
    ds.validate()?;
    Ok(ds)
}

// ---- IDX binary format --------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a str,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_string(),
                offset: self.offset as u64,
                message: format!(
                    "truncated: need {} bytes for {}, {} available",
                    n,
                    what,
                    self.bytes.len() - self.offset
                ),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parses an IDX image/label file pair bit-exactly: big-endian magic
/// `0x00000803` (images) / `0x00000801` (labels), big-endian dimension
/// sizes, unsigned byte pixels scaled to `[0, 1]` by `/ 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;
    let img_path_str = images_path.display().to_string();
    let lbl_path_str = labels_path.display().to_string();

    let mut r = ByteReader {
        bytes: &img_bytes,
        offset: 0,
        path: &img_path_str,
    };
    let magic = r.read_u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: img_path_str,
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = r.read_u32_be("image count")? as usize;
    let rows = r.read_u32_be("row count")? as usize;
    let cols = r.read_u32_be("column count")? as usize;
    let pixels = r.take(n * rows * cols, "pixel payload")?;

    let mut r = ByteReader {
        bytes: &lbl_bytes,
        offset: 0,
        path: &lbl_path_str,
    };
    let magic = r.read_u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: lbl_path_str,
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n_labels = r.read_u32_be("label count")? as usize;
    let label_bytes = r.take(n_labels, "label payload")?;

    if n != n_labels {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            n, n_labels
        )));
    }
    if n == 0 {
        return Err(Error::Dataset("empty IDX dataset".into()));
    }

    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let ds = Dataset {
        images: Tensor::from_vec(&[n, 1, rows, cols], data)?,
        labels,
        num_classes,
        split: "idx".to_string(),
        provenance: Provenance::Idx {
            images_sha256: hex(&Sha256::digest(&img_bytes)),
            labels_sha256: hex(&Sha256::digest(&lbl_bytes)),
        },
    };
    ds.validate()?;
    Ok(ds)
}

// ---- QAAD container -------------------------------------------------------

const QAAD_MAGIC: &[u8; 4] = b"QAAD";
const QAAD_VERSION: u32 = 1;

/// Adversarial payload stored alongside the clean examples.
#[derive(Clone, Debug)]
pub struct AdversarialPayload {
    /// Adversarial images, same shape as the clean images.
    pub adversarial: Tensor,
    /// JSON of the generating attack specification.
    pub spec_json: String,
    /// Per-example loss trace, one value per attack iteration.
    pub loss_trace: Vec<Vec<f32>>,
    /// Per-example count of skipped zero-gradient steps.
    pub zero_grad_steps: Vec<u32>,
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for &v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a dataset (and optional adversarial payload) to the QAAD
/// container: magic, version, metadata, raw little-endian payloads, and a
/// SHA-256 integrity trailer.
pub fn save_container(path: &Path, ds: &Dataset, adv: Option<&AdversarialPayload>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(QAAD_MAGIC);
    buf.extend_from_slice(&QAAD_VERSION.to_le_bytes());
    push_str(&mut buf, &ds.split);
    push_str(&mut buf, &serde_json::to_string(&ds.provenance)?);
    buf.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for d in ds.images.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for &y in &ds.labels {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    push_f32s(&mut buf, ds.images.data());
    match adv {
        None => buf.push(0),
        Some(p) => {
            buf.push(1);
            push_f32s(&mut buf, p.adversarial.data());
            push_str(&mut buf, &p.spec_json);
            let iters = p.loss_trace.first().map_or(0, |t| t.len());
            buf.extend_from_slice(&(iters as u32).to_le_bytes());
            for trace in &p.loss_trace {
                push_f32s(&mut buf, trace);
            }
            for &z in &p.zero_grad_steps {
                buf.extend_from_slice(&z.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a QAAD container back; the inverse of [`save_container`].
pub fn load_container(path: &Path) -> Result<(Dataset, Option<AdversarialPayload>)> {
    let bytes = fs::read(path)?;
    let path_str = path.display().to_string();
    if bytes.len() < 40 {
        return Err(Error::Checksum(path_str));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Checksum(path_str));
    }
    let mut r = ByteReader {
        bytes: body,
        offset: 0,
        path: &path_str,
    };
    let magic = r.take(4, "magic")?;
    if magic != QAAD_MAGIC {
        return Err(Error::Format {
            path: path_str,
            offset: 0,
            message: "bad magic, expected QAAD".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != QAAD_VERSION {
        return Err(Error::Version {
            found: version,
            expected: QAAD_VERSION,
        });
    }
    let read_str = |r: &mut ByteReader| -> Result<String> {
        let len = u32::from_le_bytes(r.take(4, "string length")?.try_into().expect("4 bytes"));
        let raw = r.take(len as usize, "string payload")?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Dataset("invalid utf-8 in container".into()))
    };
    let split = read_str(&mut r)?;
    let provenance: Provenance = serde_json::from_str(&read_str(&mut r)?)?;
    let classes = u32::from_le_bytes(r.take(4, "classes")?.try_into().expect("4 bytes")) as usize;
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = u32::from_le_bytes(r.take(4, "shape")?.try_into().expect("4 bytes")) as usize;
    }
    let n = shape[0];
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels
            .push(u32::from_le_bytes(r.take(4, "label")?.try_into().expect("4 bytes")) as usize);
    }
    let count: usize = shape.iter().product();
    let read_f32s = |r: &mut ByteReader, count: usize, what: &str| -> Result<Vec<f32>> {
        let raw = r.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    };
    let images = Tensor::from_vec(&shape, read_f32s(&mut r, count, "images")?)?;
    let flag = r.take(1, "adversarial flag")?[0];
    let adv = if flag == 1 {
        let adversarial = Tensor::from_vec(&shape, read_f32s(&mut r, count, "adversarial")?)?;
        let spec_json = read_str(&mut r)?;
        let iters =
            u32::from_le_bytes(r.take(4, "iterations")?.try_into().expect("4 bytes")) as usize;
        let mut loss_trace = Vec::with_capacity(n);
        for _ in 0..n {
            loss_trace.push(read_f32s(&mut r, iters, "loss trace")?);
        }
        let mut zero_grad_steps = Vec::with_capacity(n);
        for _ in 0..n {
            zero_grad_steps.push(u32::from_le_bytes(
                r.take(4, "zero-grad count")?.try_into().expect("4 bytes"),
            ));
        }
        Some(AdversarialPayload {
            adversarial,
            spec_json,
            loss_trace,
            zero_grad_steps,
        })
    } else {
        None
    };
    let ds = Dataset {
        images,
        labels,
        num_classes: classes,
        split,
        provenance,
    };
    ds.validate()?;
    Ok((ds, adv))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
