//! Binary checkpoints of a training run.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CXIP" | u32 format version | u64 header length | JSON header | payload
//! ```
//!
//! The header records the model and training configuration, counters, and a manifest of every
//! tensor (name, dtype, shape, byte offset into the payload, CRC-32 of its bytes). The payload is
//! the tensors' raw little-endian elements in manifest order. Saving the same state twice yields
//! identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_discriminator, build_generator, ModelConfig};
use crate::optim::{AdamState, TraceRecord, TrainConfig, TrainState, Trainer};
use crate::rng::{Rng, RngState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CXIP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counters {
    pub epoch: u64,
    pub iteration: u64,
    pub adam_g_steps: u64,
    pub adam_d_steps: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    /// Element type of the network and optimizer tensors.
    pub dtype: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub counters: Counters,
    pub validation: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded trainer plus the names of tensors whose stored checksum did not match.
#[derive(Clone, Debug)]
pub struct Loaded<S> {
    pub trainer: Trainer<S>,
    pub checksum_mismatches: Vec<String>,
}

const TRACE_TENSOR: &str = "trace";

fn prefixed<'a, S>(prefix: &str, list: Vec<(String, &'a Tensor<S>)>) -> Vec<(String, &'a Tensor<S>)> {
    list.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

fn moments<'a, S>(
    prefix: &str,
    names: &[(String, &Tensor<S>)],
    adam: &'a AdamState<S>,
) -> Vec<(String, &'a Tensor<S>)> {
    let m = names.iter().zip(&adam.m).map(|((n, _), t)| (format!("{prefix}.m.{n}"), t));
    let v = names.iter().zip(&adam.v).map(|((n, _), t)| (format!("{prefix}.v.{n}"), t));
    m.chain(v).collect()
}

/// Every network and optimizer tensor of `trainer`, in payload order.
fn state_tensors<S: Scalar>(trainer: &Trainer<S>) -> Vec<(String, &Tensor<S>)> {
    let g = trainer.generator.named_params();
    let d = trainer.discriminator.named_params();
    let mut out = Vec::new();
    out.extend(moments("adam_g", &g, &trainer.adam_g));
    out.extend(moments("adam_d", &d, &trainer.adam_d));
    let mut nets = prefixed("g", g);
    nets.extend(prefixed("g", trainer.generator.named_buffers()));
    nets.extend(prefixed("d", d));
    nets.extend(prefixed("d", trainer.discriminator.named_buffers()));
    nets.extend(out);
    nets
}

/// Serializes a trainer to checkpoint bytes.
pub fn to_bytes<S: Scalar>(trainer: &Trainer<S>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, dtype: &str, shape: &[usize], bytes: &[u8], payload: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name,
            dtype: dtype.to_string(),
            shape: shape.to_vec(),
            offset: payload.len() as u64,
            crc32: crc32fast::hash(bytes),
        });
        payload.extend_from_slice(bytes);
    };
    for (name, t) in state_tensors(trainer) {
        let mut bytes = Vec::with_capacity(t.len() * S::BYTES);
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        push(name, S::DTYPE, t.shape(), &bytes, &mut payload);
    }
    let trace = &trainer.state.trace;
    let mut bytes = Vec::with_capacity(trace.len() * TraceRecord::COLUMNS * 8);
    trace.iter().flat_map(|r| r.to_row()).for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    push(TRACE_TENSOR.into(), f64::DTYPE, &[trace.len(), TraceRecord::COLUMNS], &bytes, &mut payload);

    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: S::DTYPE.to_string(),
        model: trainer.generator.config.clone(),
        train: trainer.config.clone(),
        counters: Counters {
            epoch: trainer.state.epoch,
            iteration: trainer.state.iteration,
            adam_g_steps: trainer.adam_g.t,
            adam_d_steps: trainer.adam_d.t,
            rng: trainer.state.rng,
        },
        validation: trainer.state.validation.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes a checkpoint via a temporary file so a crash never leaves a partial file behind.
pub fn save_checkpoint<S: Scalar>(path: &Path, trainer: &Trainer<S>) -> Result<()> {
    let bytes = to_bytes(trainer)?;
    let tmp = path.with_extension("cxip.partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Splits checkpoint bytes into the parsed header and the payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let magic: [u8; 4] = bytes.get(..4).ok_or(Error::Truncated("checkpoint magic"))?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::NotACheckpoint(magic));
    }
    let version =
        u32::from_le_bytes(bytes.get(4..8).ok_or(Error::Truncated("checkpoint version"))?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { kind: "checkpoint", found: version, expected: FORMAT_VERSION });
    }
    let len =
        u64::from_le_bytes(bytes.get(8..16).ok_or(Error::Truncated("checkpoint header length"))?.try_into().unwrap());
    let end = usize::try_from(len).ok().and_then(|l| l.checked_add(16)).ok_or(Error::Truncated("checkpoint header"))?;
    let json = bytes.get(16..end).ok_or(Error::Truncated("checkpoint header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    if header.format_version != version {
        return Err(Error::CorruptHeader(format!("header says version {}, preamble {version}", header.format_version)));
    }
    Ok((header, &bytes[end..]))
}

fn entry_bytes<'a>(entry: &TensorEntry, payload: &'a [u8]) -> Result<&'a [u8]> {
    let width = match entry.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::CorruptHeader(format!("tensor {} has unknown dtype {other}", entry.name))),
    };
    let len = entry.shape.iter().product::<usize>() * width;
    let start = usize::try_from(entry.offset).map_err(|_| Error::Truncated("checkpoint payload"))?;
    payload.get(start..start + len).ok_or(Error::Truncated("checkpoint payload"))
}

/// Parses checkpoint bytes into a trainer. Data corruption inside a tensor does not fail the
/// load; the affected tensor names are reported instead.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Loaded<S>> {
    let (header, payload) = read_header(bytes)?;
    if header.dtype != S::DTYPE {
        return Err(Error::DtypeMismatch { found: header.dtype, expected: S::DTYPE });
    }
    for e in &header.tensors {
        entry_bytes(e, payload)?;
    }
    let find = |name: &str| {
        header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::CorruptHeader(format!("missing tensor {name}")))
    };
    let mut mismatches = Vec::new();
    let mut read_into = |name: &str, dst: &mut Tensor<S>| -> Result<()> {
        let entry = find(name)?;
        if entry.shape != dst.shape() || entry.dtype != S::DTYPE {
            return Err(Error::CorruptHeader(format!(
                "tensor {name} is {} {:?}, model expects {} {:?}",
                entry.dtype,
                entry.shape,
                S::DTYPE,
                dst.shape()
            )));
        }
        let raw = entry_bytes(entry, payload)?;
        if crc32fast::hash(raw) != entry.crc32 {
            mismatches.push(name.to_string());
        }
        for (d, chunk) in dst.data_mut().iter_mut().zip(raw.chunks_exact(S::BYTES)) {
            *d = S::read_le(chunk);
        }
        Ok(())
    };

    let mut model = header.model.clone();
    model.init_std = 0.0;
    let mut zero = Rng::new(0);
    let mut generator = build_generator::<S>(&model, &mut zero)?;
    let mut discriminator = build_discriminator::<S>(&model, &mut zero)?;
    generator.config.init_std = header.model.init_std;
    discriminator.config.init_std = header.model.init_std;

    let g_names: Vec<String> = generator.named_params().into_iter().map(|(n, _)| n).collect();
    let d_names: Vec<String> = discriminator.named_params().into_iter().map(|(n, _)| n).collect();
    let gb_names: Vec<String> = generator.named_buffers().into_iter().map(|(n, _)| n).collect();
    let db_names: Vec<String> = discriminator.named_buffers().into_iter().map(|(n, _)| n).collect();
    let mut adam_g = AdamState::new(header.train.adam, generator.named_params().into_iter().map(|(_, t)| t));
    let mut adam_d = AdamState::new(header.train.adam, discriminator.named_params().into_iter().map(|(_, t)| t));

    for (n, t) in g_names.iter().zip(generator.params_mut()) {
        read_into(&format!("g.{n}"), t)?;
    }
    for (n, t) in gb_names.iter().zip(generator.buffers_mut()) {
        read_into(&format!("g.{n}"), t)?;
    }
    for (n, t) in d_names.iter().zip(discriminator.params_mut()) {
        read_into(&format!("d.{n}"), t)?;
    }
    for (n, t) in db_names.iter().zip(discriminator.buffers_mut()) {
        read_into(&format!("d.{n}"), t)?;
    }
    for (prefix, names, adam) in [("adam_g", &g_names, &mut adam_g), ("adam_d", &d_names, &mut adam_d)] {
        for (n, t) in names.iter().zip(adam.m.iter_mut()) {
            read_into(&format!("{prefix}.m.{n}"), t)?;
        }
        for (n, t) in names.iter().zip(adam.v.iter_mut()) {
            read_into(&format!("{prefix}.v.{n}"), t)?;
        }
    }
    adam_g.t = header.counters.adam_g_steps;
    adam_d.t = header.counters.adam_d_steps;

    let trace_entry = find(TRACE_TENSOR)?;
    if trace_entry.dtype != f64::DTYPE || trace_entry.shape.len() != 2 || trace_entry.shape[1] != TraceRecord::COLUMNS {
        return Err(Error::CorruptHeader(format!("trace tensor has shape {:?}", trace_entry.shape)));
    }
    let raw = entry_bytes(trace_entry, payload)?;
    if crc32fast::hash(raw) != trace_entry.crc32 {
        mismatches.push(TRACE_TENSOR.to_string());
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(f64::read_le).collect();
    let trace = values.chunks_exact(TraceRecord::COLUMNS).map(TraceRecord::from_row).collect();

    let c = &header.counters;
    let state =
        TrainState { epoch: c.epoch, iteration: c.iteration, rng: c.rng, trace, validation: header.validation.clone() };
    let trainer = Trainer::from_parts(generator, discriminator, adam_g, adam_d, header.train, state)?;
    Ok(Loaded { trainer, checksum_mismatches: mismatches })
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Loaded<S>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::TrainConfig;

    fn small_trainer() -> Trainer<f64> {
        let model = ModelConfig::with_sizes(16, 4, 4);
        Trainer::new(&model, TrainConfig::default(), 11).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let t = small_trainer();
        let a = to_bytes(&t).unwrap();
        let loaded = from_bytes::<f64>(&a).unwrap();
        assert!(loaded.checksum_mismatches.is_empty());
        assert_eq!(to_bytes(&loaded.trainer).unwrap(), a);
        assert_eq!(loaded.trainer.generator, t.generator);
        assert_eq!(loaded.trainer.discriminator, t.discriminator);
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = to_bytes(&small_trainer()).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let err = from_bytes::<f64>(&bad).unwrap_err();
        assert!(matches!(err, Error::NotACheckpoint(m) if &m == b"XXXX"));
        assert!(err.to_string().contains("not a checkpoint"));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes::<f64>(&bad), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(matches!(from_bytes::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(from_bytes::<f64>(&bytes[..20]), Err(Error::Truncated(_))));
        assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::DtypeMismatch { .. })));
    }

    #[test]
    fn payload_corruption_is_reported() {
        let mut bytes = to_bytes(&small_trainer()).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x40;
        let loaded = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(loaded.checksum_mismatches.len(), 1);
    }
}
