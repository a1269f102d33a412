//! The `OVWM` v1 weight container.
//!
//! ```text
//! "OVWM" | version: u32 LE = 1 | manifest_len: u64 LE | manifest (UTF-8) | payload
//! ```
//!
//! The manifest is one `key=value` pair per line and ends with a lone `end`
//! line. Integer hyperparameters are decimal; `ln_eps` and `rope_base` are
//! hexadecimal floats so they survive any reader bit-exactly. Each tensor is
//! a line `tensor=<name> <dtype> <d0,d1,...> <offset> <nbytes>` with offsets
//! relative to the start of the payload. Tensors are row-major and
//! little-endian and tile the payload exactly.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::hexfloat;
use crate::model::{Dtype, HeadWeights, LayerNormParams, MlpWeights, ModelWeights, RopeConfig};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"OVWM";
pub const VERSION: u32 = 1;
/// Bytes before the manifest: magic, version, manifest length.
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

impl TensorRecord {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn manifest_value(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        format!(
            "{} {} {} {} {}",
            self.name,
            self.dtype.name(),
            shape.join(","),
            self.offset,
            self.nbytes
        )
    }

    fn parse(value: &str) -> Result<Self> {
        let parts: Vec<&str> = value.split(' ').collect();
        let [name, dtype, shape, offset, nbytes] = parts[..] else {
            return Err(Error::Format(format!("malformed tensor record `{value}`")));
        };
        let dtype = match dtype {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
        };
        let shape = shape
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format(format!("bad shape in `{value}`")))?;
        let num = |s: &str| s.parse::<u64>().map_err(|_| Error::Format(format!("bad integer `{s}`")));
        let rec = Self {
            name: name.to_string(),
            dtype,
            shape,
            offset: num(offset)?,
            nbytes: num(nbytes)?,
        };
        let expected = rec
            .shape
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(rec.nbytes) {
            return Err(Error::Format(format!(
                "tensor {} declares {} bytes for shape {:?}",
                rec.name, rec.nbytes, rec.shape
            )));
        }
        Ok(rec)
    }
}

enum Tensor<'a> {
    Mat(&'a Matrix),
    Vec(&'a [f64]),
}

impl Tensor<'_> {
    fn shape(&self) -> Vec<usize> {
        match self {
            Tensor::Mat(m) => vec![m.rows(), m.cols()],
            Tensor::Vec(v) => vec![v.len()],
        }
    }

    fn data(&self) -> &[f64] {
        match self {
            Tensor::Mat(m) => m.data(),
            Tensor::Vec(v) => v,
        }
    }
}

fn tensors(model: &ModelWeights) -> Vec<(String, Tensor<'_>)> {
    let mut out = vec![
        ("embed".to_string(), Tensor::Mat(&model.embed)),
        ("unembed".to_string(), Tensor::Mat(&model.unembed)),
        ("ln.gamma".to_string(), Tensor::Vec(&model.ln.gamma)),
        ("ln.beta".to_string(), Tensor::Vec(&model.ln.beta)),
        ("mlp.enc_w".to_string(), Tensor::Mat(&model.mlp.enc_w)),
        ("mlp.enc_b".to_string(), Tensor::Vec(&model.mlp.enc_b)),
        ("mlp.dec_w".to_string(), Tensor::Mat(&model.mlp.dec_w)),
    ];
    for (h, head) in model.heads.iter().enumerate() {
        out.push((format!("head.{h}.query"), Tensor::Mat(&head.query)));
        out.push((format!("head.{h}.key"), Tensor::Mat(&head.key)));
        out.push((format!("head.{h}.value"), Tensor::Mat(&head.value)));
    }
    out
}

fn encode_scalars(data: &[f64], dtype: Dtype, out: &mut Vec<u8>) {
    for &x in data {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
}

/// Serializes `model` to bytes. Identical models give identical bytes.
pub fn encode_model(model: &ModelWeights) -> Result<Vec<u8>> {
    model.check_shapes()?;
    let dtype = model.dtype;
    let mut manifest = String::new();
    let mut payload = Vec::new();
    let mut line = |k: &str, v: String| {
        manifest.push_str(k);
        manifest.push('=');
        manifest.push_str(&v);
        manifest.push('\n');
    };
    line("d_vocab", model.d_vocab.to_string());
    line("d_emb", model.d_emb.to_string());
    line("n_heads", model.n_heads.to_string());
    line("d_mlp", model.d_mlp.to_string());
    line("n_ctx_max", model.n_ctx_max.to_string());
    line("ln_eps", hexfloat::format(model.ln.eps));
    line("rope_enabled", u8::from(model.rope.enabled).to_string());
    line("rope_base", hexfloat::format(model.rope.base));
    line("rope_dim", model.rope.dim.to_string());
    for (name, t) in tensors(model) {
        let offset = payload.len() as u64;
        encode_scalars(t.data(), dtype, &mut payload);
        let rec = TensorRecord {
            name,
            dtype,
            shape: t.shape(),
            offset,
            nbytes: payload.len() as u64 - offset,
        };
        line("tensor", rec.manifest_value());
    }
    manifest.push_str("end\n");

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes `model` to `sink`, returning the number of bytes written.
pub fn write_model<W: Write>(model: &ModelWeights, mut sink: W) -> Result<u64> {
    let bytes = encode_model(model)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len() as u64)
}

pub fn read_model<R: Read>(mut source: R) -> Result<ModelWeights> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

struct Manifest {
    params: BTreeMap<String, String>,
    records: Vec<TensorRecord>,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let body = text
            .strip_suffix("end\n")
            .ok_or_else(|| Error::Format("manifest does not end with an `end` line".into()))?;
        if !(body.is_empty() || body.ends_with('\n')) {
            return Err(Error::Format("manifest does not end with an `end` line".into()));
        }
        let mut params = BTreeMap::new();
        let mut records = Vec::new();
        for line in body.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line `{line}` has no `=`")))?;
            if k == "tensor" {
                records.push(TensorRecord::parse(v)?);
            } else if params.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Format(format!("duplicate manifest key `{k}`")));
            }
        }
        Ok(Self { params, records })
    }

    fn take(&mut self, key: &str) -> Result<String> {
        self.params
            .remove(key)
            .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("`{key}` is not a decimal integer: `{v}`")))
    }

    fn hex(&mut self, key: &str) -> Result<f64> {
        let v = self.take(key)?;
        hexfloat::parse(&v).ok_or_else(|| Error::Format(format!("`{key}` is not a hex float: `{v}`")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing OVWM magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{}-byte header is incomplete", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > available {
        return Err(Error::Truncated(format!(
            "manifest declares {manifest_len} bytes, {available} available"
        )));
    }
    let manifest_end = HEADER_LEN + manifest_len as usize;
    let text = std::str::from_utf8(&bytes[HEADER_LEN..manifest_end])
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let mut manifest = Manifest::parse(text)?;
    let payload = &bytes[manifest_end..];

    let d_vocab = manifest.usize("d_vocab")?;
    let d_emb = manifest.usize("d_emb")?;
    let n_heads = manifest.usize("n_heads")?;
    let d_mlp = manifest.usize("d_mlp")?;
    let n_ctx_max = manifest.usize("n_ctx_max")?;
    let eps = manifest.hex("ln_eps")?;
    let rope_enabled = match manifest.take("rope_enabled")?.as_str() {
        "0" => false,
        "1" => true,
        other => return Err(Error::Format(format!("rope_enabled must be 0 or 1, got `{other}`"))),
    };
    let rope_base = manifest.hex("rope_base")?;
    let rope_dim = manifest.usize("rope_dim")?;
    if let Some(k) = manifest.params.keys().next() {
        return Err(Error::Format(format!("unknown manifest key `{k}`")));
    }

    // records must tile the payload with no gaps, overlaps or leftovers
    let mut spans: Vec<(u64, u64)> = manifest.records.iter().map(|r| (r.offset, r.nbytes)).collect();
    spans.sort_unstable();
    let mut cursor = 0u64;
    for (offset, nbytes) in spans {
        if offset != cursor {
            return Err(Error::Format(format!("tensor payload gap or overlap at byte {offset}")));
        }
        cursor = offset
            .checked_add(nbytes)
            .ok_or_else(|| Error::Format("tensor extent overflows".into()))?;
    }
    if cursor > payload.len() as u64 {
        return Err(Error::Truncated(format!(
            "payload holds {} bytes, manifest needs {cursor}",
            payload.len()
        )));
    }
    if cursor < payload.len() as u64 {
        return Err(Error::Truncated(format!(
            "payload holds {} bytes but manifest accounts for {cursor}",
            payload.len()
        )));
    }

    let mut seen = HashSet::new();
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mut any_f64 = manifest.records.is_empty();
    for rec in &manifest.records {
        if !seen.insert(rec.name.clone()) {
            return Err(Error::Format(format!("duplicate tensor `{}`", rec.name)));
        }
        any_f64 |= rec.dtype == Dtype::F64;
        let raw = &payload[rec.offset as usize..(rec.offset + rec.nbytes) as usize];
        let data: Vec<f64> = match rec.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        debug_assert_eq!(data.len(), rec.numel());
        tensors.insert(rec.name.clone(), (rec.shape.clone(), data));
    }

    let mut take_mat = |name: &str| -> Result<Matrix> {
        let (shape, data) = tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        match shape[..] {
            [r, c] => Matrix::from_vec(r, c, data),
            _ => Err(Error::Validation(format!("tensor `{name}` must be 2-D, got {shape:?}"))),
        }
    };
    let embed = take_mat("embed")?;
    let unembed = take_mat("unembed")?;
    let enc_w = take_mat("mlp.enc_w")?;
    let dec_w = take_mat("mlp.dec_w")?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        heads.push(HeadWeights {
            query: take_mat(&format!("head.{h}.query"))?,
            key: take_mat(&format!("head.{h}.key"))?,
            value: take_mat(&format!("head.{h}.value"))?,
        });
    }
    let mut take_vec = |name: &str| -> Result<Vec<f64>> {
        let (shape, data) = tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if shape.len() != 1 {
            return Err(Error::Validation(format!("tensor `{name}` must be 1-D, got {shape:?}")));
        }
        Ok(data)
    };
    let gamma = take_vec("ln.gamma")?;
    let beta = take_vec("ln.beta")?;
    let enc_b = take_vec("mlp.enc_b")?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{name}`")));
    }

    let model = ModelWeights {
        d_vocab,
        d_emb,
        n_heads,
        d_mlp,
        n_ctx_max,
        embed,
        unembed,
        heads,
        ln: LayerNormParams { gamma, beta, eps },
        mlp: MlpWeights { enc_w, enc_b, dec_w },
        rope: RopeConfig {
            enabled: rope_enabled,
            base: rope_base,
            dim: rope_dim,
        },
        dtype: if any_f64 { Dtype::F64 } else { Dtype::F32 },
    };
    model.validate().map_err(|e| match e {
        Error::Shape(m) | Error::Config(m) => Error::Validation(m),
        other => other,
    })?;
    Ok(model)
}
