//! Portable binary checkpoint format.
//!
//! Byte layout, in order:
//!
//! ```text
//! offset  size        content
//! 0       8           magic "PALPCKP1"
//! 8       4           header length H, u32 little-endian
//! 12      H           header, UTF-8 JSON (see `Header`)
//! 12+H    rest        payload: f64 little-endian values
//! ```
//!
//! The payload concatenates the tensors named in the header's `tensors`
//! list, in list order, row-major. The list is always: each layer's `w` then
//! `b` (in layer order), the embedding table rows, then each adapter pair's
//! `a` then `b` when an adapter is present. Decoding validates the list
//! against the shapes implied by the rest of the header, so a file edited
//! into inconsistency is rejected rather than misread.
//!
//! [`decode`] returns errors — never panics — on arbitrary input bytes.

use super::embed::{is_placeholder, EmbeddingTable, NULL_TOKEN};
use super::lora::{LoraAdapter, LoraPair};
use super::params::{Affine, DenoiserParams, ModelConfig};
use crate::diffcore::tensor::Tensor;
use crate::diffusion::ScheduleSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PALPCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("file too short: {0} bytes")]
    TooShort(usize),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("header length {0} exceeds file size")]
    HeaderOverrun(usize),
    #[error("header is not valid JSON: {0}")]
    BadHeader(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("inconsistent header: {0}")]
    Inconsistent(String),
    #[error("payload holds {got} values, header implies {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("payload value {0} is not finite")]
    NonFinite(usize),
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] CkptError),
}

/// Everything needed to resume or run a model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub table: EmbeddingTable,
    pub lora: Option<LoraAdapter>,
    pub schedule: ScheduleSpec,
}

#[derive(Serialize, Deserialize)]
struct LoraMeta {
    rank: usize,
    scale: f64,
    targets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    schedule: ScheduleSpec,
    vocab: Vec<String>,
    trainable: Vec<bool>,
    placeholders: Vec<(String, String)>,
    lora: Option<LoraMeta>,
    tensors: Vec<TensorMeta>,
}

/// The tensor list implied by a header's model/vocab/lora fields.
fn expected_tensors(h: &Header) -> Result<Vec<TensorMeta>, CkptError> {
    let m = &h.model;
    if m.image_side == 0 || m.hidden_width == 0 || m.hidden_layers == 0 || m.cond_dim == 0 {
        return Err(CkptError::Inconsistent("zero model dimension".into()));
    }
    if m.image_side > 4096
        || m.hidden_width > 1 << 20
        || m.hidden_layers > 64
        || m.time_pairs > 32
        || m.cond_dim > 1 << 16
    {
        return Err(CkptError::Inconsistent("implausibly large model".into()));
    }
    let mut widths = vec![m.input_width()];
    widths.extend(std::iter::repeat_n(m.hidden_width, m.hidden_layers));
    widths.push(m.image_pixels());

    let mut out = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        out.push(TensorMeta { name: format!("layer{i}.w"), shape: vec![w[1], w[0]] });
        out.push(TensorMeta { name: format!("layer{i}.b"), shape: vec![w[1]] });
    }
    out.push(TensorMeta { name: "table.rows".into(), shape: vec![h.vocab.len(), m.cond_dim] });
    if let Some(lora) = &h.lora {
        if lora.rank == 0 {
            return Err(CkptError::Inconsistent("adapter rank 0".into()));
        }
        let n_layers = widths.len() - 1;
        for (j, &tgt) in lora.targets.iter().enumerate() {
            if tgt >= n_layers {
                return Err(CkptError::Inconsistent(format!("adapter target {tgt} out of range")));
            }
            if j > 0 && lora.targets[j - 1] >= tgt {
                return Err(CkptError::Inconsistent("adapter targets not strictly increasing".into()));
            }
            let (d_out, d_in) = (widths[tgt + 1], widths[tgt]);
            if lora.rank > d_in.min(d_out) {
                return Err(CkptError::Inconsistent(format!("rank {} exceeds layer {tgt}", lora.rank)));
            }
            out.push(TensorMeta { name: format!("lora{j}.a"), shape: vec![lora.rank, d_in] });
            out.push(TensorMeta { name: format!("lora{j}.b"), shape: vec![d_out, lora.rank] });
        }
    }
    Ok(out)
}

fn validate_header(h: &Header) -> Result<Vec<TensorMeta>, CkptError> {
    if h.version != FORMAT_VERSION {
        return Err(CkptError::UnsupportedVersion(h.version));
    }
    if !h.schedule.is_valid() {
        return Err(CkptError::Inconsistent("invalid schedule".into()));
    }
    if h.model.timesteps != h.schedule.timesteps {
        return Err(CkptError::Inconsistent("model/schedule timestep mismatch".into()));
    }
    if h.vocab.is_empty() || h.vocab.len() > 4096 {
        return Err(CkptError::Inconsistent("bad vocabulary size".into()));
    }
    if !h.vocab.iter().any(|t| t == NULL_TOKEN) {
        return Err(CkptError::Inconsistent(format!("vocabulary lacks {NULL_TOKEN}")));
    }
    if h.trainable.len() != h.vocab.len() {
        return Err(CkptError::Inconsistent("trainable mask length != vocab".into()));
    }
    for i in 0..h.vocab.len() {
        if h.vocab[i..].iter().skip(1).any(|t| *t == h.vocab[i]) {
            return Err(CkptError::Inconsistent(format!("duplicate token `{}`", h.vocab[i])));
        }
    }
    for (ph, class) in &h.placeholders {
        if !is_placeholder(ph) {
            return Err(CkptError::Inconsistent(format!("`{ph}` is not a placeholder name")));
        }
        if !h.vocab.iter().any(|t| t == ph) || !h.vocab.iter().any(|t| t == class) {
            return Err(CkptError::Inconsistent(format!("placeholder pair ({ph}, {class}) not in vocab")));
        }
    }
    let expected = expected_tensors(h)?;
    if expected.len() != h.tensors.len()
        || expected
            .iter()
            .zip(&h.tensors)
            .any(|(e, g)| e.name != g.name || e.shape != g.shape)
    {
        return Err(CkptError::Inconsistent("tensor list does not match model fields".into()));
    }
    Ok(expected)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let lora_meta = self.lora.as_ref().map(|l| LoraMeta {
            rank: l.rank,
            scale: l.scale,
            targets: l.targets.clone(),
        });
        let mut header = Header {
            version: FORMAT_VERSION,
            model: self.params.config.clone(),
            schedule: self.schedule,
            vocab: self.table.tokens().to_vec(),
            trainable: self.table.trainable_mask().to_vec(),
            placeholders: self.table.placeholder_classes().to_vec(),
            lora: lora_meta,
            tensors: Vec::new(),
        };
        header.tensors = expected_tensors(&header).expect("in-memory checkpoint is consistent");

        let mut payload: Vec<&Tensor> = Vec::new();
        for layer in &self.params.layers {
            payload.push(&layer.w);
            payload.push(&layer.b);
        }
        payload.push(self.table.rows());
        if let Some(lora) = &self.lora {
            for pair in &lora.pairs {
                payload.push(&pair.a);
                payload.push(&pair.b);
            }
        }
        debug_assert_eq!(payload.len(), header.tensors.len());

        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let payload_len: usize = payload.iter().map(|t| t.numel()).sum();
        let mut out = Vec::with_capacity(12 + header_json.len() + payload_len * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CkptError> {
        if bytes.len() < 12 {
            return Err(CkptError::TooShort(bytes.len()));
        }
        if &bytes[..8] != MAGIC {
            return Err(CkptError::BadMagic);
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if hlen > body.len() {
            return Err(CkptError::HeaderOverrun(hlen));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| CkptError::BadHeader(e.to_string()))?;
        let tensors = validate_header(&header)?;

        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(CkptError::PayloadSize {
                expected: tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum(),
                got: payload.len() / 8,
            });
        }
        let got = payload.len() / 8;
        // Sizes were validated against caps above, so the sum cannot overflow.
        let expected: usize = tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if got != expected {
            return Err(CkptError::PayloadSize { expected, got });
        }

        let mut values = Vec::with_capacity(got);
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CkptError::NonFinite(i));
            }
            values.push(v);
        }

        let mut cursor = 0usize;
        let mut take = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.to_vec(), values[cursor..cursor + n].to_vec());
            cursor += n;
            t
        };

        let n_layers = header.model.hidden_layers + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let w = take(&tensors[2 * i].shape);
            let b = take(&tensors[2 * i + 1].shape);
            layers.push(Affine { w, b });
        }
        let rows = take(&tensors[2 * n_layers].shape);
        let table = EmbeddingTable::from_raw_parts(
            header.vocab,
            rows,
            header.trainable,
            header.placeholders,
        );
        let lora = header.lora.map(|meta| {
            let pairs = (0..meta.targets.len())
                .map(|j| {
                    let a = take(&tensors[2 * n_layers + 1 + 2 * j].shape);
                    let b = take(&tensors[2 * n_layers + 2 + 2 * j].shape);
                    LoraPair { a, b }
                })
                .collect();
            LoraAdapter { pairs, rank: meta.rank, scale: meta.scale, targets: meta.targets }
        });

        Ok(Checkpoint {
            params: DenoiserParams { config: header.model, layers },
            table,
            lora,
            schedule: header.schedule,
        })
    }

    pub fn save_to(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.encode())
    }

    pub fn load_from(path: &Path) -> Result<Checkpoint, LoadError> {
        Ok(Checkpoint::decode(&std::fs::read(path)?)?)
    }
}
