//! The "QAAM" model container.
//!
//! Layout: magic `QAAM`, format version, architecture id, input shape and
//! class count, tap indices, layer records (tag byte, dimensions, raw
//! little-endian f32 payloads, quantization parameters, BN statistics), and
//! a SHA-256 integrity trailer. `load(save(m))` reproduces the model
//! bit-exactly, quantization parameters included.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Layer, Linear, Model, Relu};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

const QAAM_MAGIC: &[u8; 4] = b"QAAM";
const QAAM_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_LINEAR: u8 = 2;
const TAG_BATCHNORM: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_MAXPOOL: u8 = 5;
const TAG_AVGPOOL: u8 = 6;
const TAG_FLATTEN: u8 = 7;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
    fn quant(&mut self, q: &QuantParams) {
        self.u8(q.bits);
        self.u8(q.signed as u8);
        self.f32(q.scale);
        self.f32(q.bias);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                offset: self.offset as u64,
                message: format!("truncated: need {n} bytes for {what}"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| Error::Format {
            path: self.path.clone(),
            offset: self.offset as u64,
            message: format!("invalid utf-8 in {what}"),
        })
    }
    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let rank = self.u32(what)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(what)? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count * 4, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(&shape, data)
    }
    fn quant(&mut self, what: &str) -> Result<QuantParams> {
        let bits = self.u8(what)?;
        let signed = self.u8(what)? != 0;
        let scale = self.f32(what)?;
        let bias = self.f32(what)?;
        QuantParams::new(bits, scale, bias, signed)
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    model.validate()?;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(QAAM_MAGIC);
    w.u32(QAAM_VERSION);
    w.str(&model.architecture_id);
    for d in model.input_shape {
        w.u32(d as u32);
    }
    w.u32(model.num_classes as u32);
    w.u32(model.tap_layers.len() as u32);
    for &t in &model.tap_layers {
        w.u32(t as u32);
    }
    w.u32(model.layers.len() as u32);
    for layer in &model.layers {
        match layer {
            Layer::Conv2d(c) => {
                w.u8(TAG_CONV);
                w.u32(c.out_channels as u32);
                w.u32(c.in_channels as u32);
                w.u32(c.kernel_h as u32);
                w.u32(c.kernel_w as u32);
                w.u32(c.padding as u32);
                w.tensor(&c.weight);
                w.tensor(&c.bias);
                w.quant(&c.weight_q);
            }
            Layer::Linear(l) => {
                w.u8(TAG_LINEAR);
                w.u32(l.in_features as u32);
                w.u32(l.out_features as u32);
                w.tensor(&l.weight);
                w.tensor(&l.bias);
                w.quant(&l.weight_q);
            }
            Layer::BatchNorm(b) => {
                w.u8(TAG_BATCHNORM);
                w.u32(b.channels as u32);
                w.tensor(&b.gamma);
                w.tensor(&b.beta);
                w.tensor(&b.running_mean);
                w.tensor(&b.running_var);
                w.f32(b.momentum);
                w.f32(b.epsilon);
            }
            Layer::Relu(r) => {
                w.u8(TAG_RELU);
                w.quant(&r.act_q);
            }
            Layer::MaxPool2 => w.u8(TAG_MAXPOOL),
            Layer::AvgPool2 => w.u8(TAG_AVGPOOL),
            Layer::Flatten => w.u8(TAG_FLATTEN),
        }
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let path_str = path.display().to_string();
    if bytes.len() < 40 {
        return Err(Error::Checksum(path_str));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Checksum(path_str));
    }
    let mut r = Reader {
        bytes: body,
        offset: 0,
        path: path_str.clone(),
    };
    if r.take(4, "magic")? != QAAM_MAGIC {
        return Err(Error::Format {
            path: path_str,
            offset: 0,
            message: "bad magic, expected QAAM".into(),
        });
    }
    let version = r.u32("version")?;
    if version != QAAM_VERSION {
        return Err(Error::Version {
            found: version,
            expected: QAAM_VERSION,
        });
    }
    let architecture_id = r.str("architecture id")?;
    let input_shape = [
        r.u32("input shape")? as usize,
        r.u32("input shape")? as usize,
        r.u32("input shape")? as usize,
    ];
    let num_classes = r.u32("class count")? as usize;
    let n_taps = r.u32("tap count")? as usize;
    let mut tap_layers = Vec::with_capacity(n_taps);
    for _ in 0..n_taps {
        tap_layers.push(r.u32("tap index")? as usize);
    }
    let n_layers = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8("layer tag")?;
        layers.push(match tag {
            TAG_CONV => Layer::Conv2d(Conv2d {
                out_channels: r.u32("conv dims")? as usize,
                in_channels: r.u32("conv dims")? as usize,
                kernel_h: r.u32("conv dims")? as usize,
                kernel_w: r.u32("conv dims")? as usize,
                padding: r.u32("conv dims")? as usize,
                weight: r.tensor("conv weight")?,
                bias: r.tensor("conv bias")?,
                weight_q: r.quant("conv quant")?,
            }),
            TAG_LINEAR => Layer::Linear(Linear {
                in_features: r.u32("linear dims")? as usize,
                out_features: r.u32("linear dims")? as usize,
                weight: r.tensor("linear weight")?,
                bias: r.tensor("linear bias")?,
                weight_q: r.quant("linear quant")?,
            }),
            TAG_BATCHNORM => Layer::BatchNorm(BatchNorm {
                channels: r.u32("bn channels")? as usize,
                gamma: r.tensor("bn gamma")?,
                beta: r.tensor("bn beta")?,
                running_mean: r.tensor("bn running mean")?,
                running_var: r.tensor("bn running var")?,
                momentum: r.f32("bn momentum")?,
                epsilon: r.f32("bn epsilon")?,
            }),
            TAG_RELU => Layer::Relu(Relu {
                act_q: r.quant("relu quant")?,
            }),
            TAG_MAXPOOL => Layer::MaxPool2,
            TAG_AVGPOOL => Layer::AvgPool2,
            TAG_FLATTEN => Layer::Flatten,
            other => {
                return Err(Error::Format {
                    path: path_str,
                    offset: r.offset as u64,
                    message: format!("unknown layer tag {other}"),
                })
            }
        });
    }
    let model = Model {
        architecture_id,
        input_shape,
        num_classes,
        layers,
        tap_layers,
    };
    model.validate()?;
    Ok(model)
}

/// SHA-256 of a file on disk, hex-encoded (manifest bookkeeping).
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(crate::data::hex(&Sha256::digest(&bytes)))
}
