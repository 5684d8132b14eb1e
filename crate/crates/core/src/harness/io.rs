//! Versioned on-disk containers for datasets, policy checkpoints and
//! adapters, plus CSV tables.
//!
//! Every container is a magic line, one JSON header line, then a
//! little-endian `f32` payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapters::{params_checksum, AdaptedPolicy, AdapterConfig, LowRankPair};
use crate::envs::{ChunkPair, Dataset, DatasetHeader, DATASET_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{Activation, DenseNet, Layer, Matrix};
use crate::policy::{ChunkSpec, Normalizer, PolicyParams};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const ADAPTER_SCHEMA_VERSION: u32 = 1;

const DATASET_KIND: &str = "dataset";
const POLICY_KIND: &str = "policy";
const ADAPTER_KIND: &str = "adapter";

fn magic(kind: &str) -> String {
    format!("remac-lab/{kind}")
}

fn encode<H: Serialize>(kind: &str, header: &H, payload: &[u8]) -> Vec<u8> {
    let mut out = magic(kind).into_bytes();
    out.push(b'\n');
    out.extend(serde_json::to_vec(header).expect("plain header"));
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

/// Split a container into its parsed header and payload, checking the magic
/// line and schema version before the header's shape.
fn decode<'a, H: DeserializeOwned>(kind: &'static str, expected: u32, bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    let bad = |reason: String| Error::Format {
        kind,
        reason: format!("{reason} (reader expects schema version {expected})"),
    };
    let first = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header".into()))?;
    if &bytes[..first] != magic(kind).as_bytes() {
        return Err(bad(format!("not a {kind} file")));
    }
    let rest = &bytes[first + 1..];
    let second = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("unterminated header".into()))?;
    let line = &rest[..second];
    let probe: VersionProbe = serde_json::from_slice(line).map_err(|e| bad(format!("unreadable header: {e}")))?;
    if probe.schema_version != expected {
        return Err(Error::SchemaVersion {
            kind,
            found: probe.schema_version,
            expected,
        });
    }
    let header = serde_json::from_slice(line).map_err(|e| bad(format!("invalid header: {e}")))?;
    Ok((header, &rest[second + 1..]))
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Sequential reader over an `f32` payload.
struct Floats<'a> {
    kind: &'static str,
    bytes: &'a [u8],
}

impl<'a> Floats<'a> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = 4 * n;
        if self.bytes.len() < need {
            return Err(Error::Format {
                kind: self.kind,
                reason: format!("payload truncated: need {need} bytes, have {}", self.bytes.len()),
            });
        }
        let (head, tail) = self.bytes.split_at(need);
        self.bytes = tail;
        Ok(head
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn take_byte(&mut self) -> Result<u8> {
        let (&b, tail) = self.bytes.split_first().ok_or_else(|| Error::Format {
            kind: self.kind,
            reason: "payload truncated".into(),
        })?;
        self.bytes = tail;
        Ok(b)
    }

    fn take_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.take(rows * cols)?)
    }

    fn finish(self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Format {
                kind: self.kind,
                reason: format!("{} trailing payload bytes", self.bytes.len()),
            })
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut payload = Vec::new();
    for pair in &ds.pairs {
        push_f32(&mut payload, &pair.observation);
        push_f32(&mut payload, pair.actions.as_slice());
        payload.push(pair.padded);
    }
    encode(DATASET_KIND, &ds.header, &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (header, payload): (DatasetHeader, _) = decode(DATASET_KIND, DATASET_SCHEMA_VERSION, bytes)?;
    let mut floats = Floats {
        kind: DATASET_KIND,
        bytes: payload,
    };
    let mut pairs = Vec::with_capacity(header.pairs);
    for _ in 0..header.pairs {
        let observation = floats.take(header.obs_dim)?;
        let actions = floats.take_matrix(header.horizon, header.action_dim)?;
        let padded = floats.take_byte()?;
        pairs.push(ChunkPair {
            observation,
            actions,
            padded,
        });
    }
    floats.finish()?;
    Ok(Dataset { header, pairs })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_file(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

#[derive(Serialize, Deserialize)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyHeader {
    schema_version: u32,
    spec: ChunkSpec,
    obs_dim: usize,
    norm: Normalizer,
    layers: Vec<LayerShape>,
    mask_projection: bool,
}

/// Round every network parameter to `f32`, the precision checkpoints store.
pub fn round_to_f32(params: &mut PolicyParams) {
    let flat: Vec<f64> = params.net.flat_params().iter().map(|v| *v as f32 as f64).collect();
    params.net.set_flat_params(&flat).expect("same shape");
    if let Some(m) = &mut params.mask_projection {
        m.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Round adapter weights to `f32` so an in-memory adapter matches its
/// stored form.
pub fn round_adapter_to_f32(adapted: &mut AdaptedPolicy) {
    let round = |m: &mut Matrix| m.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
    for p in &mut adapted.pairs {
        round(&mut p.down);
        round(&mut p.up);
    }
    if let Some(m) = &mut adapted.mask_projection {
        round(m);
    }
}

pub fn encode_policy(params: &PolicyParams) -> Vec<u8> {
    let header = PolicyHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        spec: params.spec,
        obs_dim: params.obs_dim,
        norm: params.norm.clone(),
        layers: params
            .net
            .layers
            .iter()
            .map(|l| LayerShape {
                inputs: l.input_dim(),
                outputs: l.output_dim(),
                activation: l.activation,
            })
            .collect(),
        mask_projection: params.mask_projection.is_some(),
    };
    let mut payload = Vec::new();
    push_f32(&mut payload, &params.net.flat_params());
    if let Some(m) = &params.mask_projection {
        push_f32(&mut payload, m.as_slice());
    }
    encode(POLICY_KIND, &header, &payload)
}

pub fn decode_policy(bytes: &[u8]) -> Result<PolicyParams> {
    let (header, payload): (PolicyHeader, _) = decode(POLICY_KIND, CHECKPOINT_SCHEMA_VERSION, bytes)?;
    let mut floats = Floats {
        kind: POLICY_KIND,
        bytes: payload,
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for shape in &header.layers {
        let weight = floats.take_matrix(shape.outputs, shape.inputs)?;
        let bias = floats.take(shape.outputs)?;
        layers.push(Layer {
            weight,
            bias,
            activation: shape.activation,
        });
    }
    let horizon = header.spec.horizon;
    let mask_projection = if header.mask_projection {
        Some(floats.take_matrix(horizon, horizon)?)
    } else {
        None
    };
    floats.finish()?;
    let params = PolicyParams {
        spec: header.spec,
        obs_dim: header.obs_dim,
        norm: header.norm,
        net: DenseNet { layers },
        mask_projection,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_policy(path: &Path, params: &PolicyParams) -> Result<()> {
    write_file(path, &encode_policy(params))
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    decode_policy(&read_file(path)?)
}

#[derive(Serialize, Deserialize)]
struct PairShape {
    layer: usize,
    inputs: usize,
    outputs: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterHeader {
    schema_version: u32,
    /// Checksum of the base checkpoint the adapter was trained on.
    base_hash: String,
    config: AdapterConfig,
    pairs: Vec<PairShape>,
    mask_projection: bool,
}

/// Unmerged adapter weights; the base is referenced by checksum only.
pub fn encode_adapter(adapted: &AdaptedPolicy) -> Vec<u8> {
    let header = AdapterHeader {
        schema_version: ADAPTER_SCHEMA_VERSION,
        base_hash: params_checksum(adapted.base()),
        config: adapted.config.clone(),
        pairs: adapted
            .pairs
            .iter()
            .map(|p| PairShape {
                layer: p.layer,
                inputs: p.down.cols(),
                outputs: p.up.rows(),
            })
            .collect(),
        mask_projection: adapted.mask_projection.is_some(),
    };
    let mut payload = Vec::new();
    for p in &adapted.pairs {
        push_f32(&mut payload, p.down.as_slice());
        push_f32(&mut payload, p.up.as_slice());
    }
    if let Some(m) = &adapted.mask_projection {
        push_f32(&mut payload, m.as_slice());
    }
    encode(ADAPTER_KIND, &header, &payload)
}

pub fn decode_adapter(bytes: &[u8], base: PolicyParams) -> Result<AdaptedPolicy> {
    let (header, payload): (AdapterHeader, _) = decode(ADAPTER_KIND, ADAPTER_SCHEMA_VERSION, bytes)?;
    let found = params_checksum(&base);
    if found != header.base_hash {
        return Err(Error::BaseHash {
            expected: header.base_hash,
            found,
        });
    }
    let mut floats = Floats {
        kind: ADAPTER_KIND,
        bytes: payload,
    };
    let rank = header.config.rank;
    let mut pairs = Vec::with_capacity(header.pairs.len());
    for shape in &header.pairs {
        let down = floats.take_matrix(rank, shape.inputs)?;
        let up = floats.take_matrix(shape.outputs, rank)?;
        pairs.push(LowRankPair {
            layer: shape.layer,
            down,
            up,
        });
    }
    let horizon = base.spec.horizon;
    let projection = if header.mask_projection {
        Some(floats.take_matrix(horizon, horizon)?)
    } else {
        None
    };
    floats.finish()?;
    AdaptedPolicy::from_parts(base, header.config, pairs, projection)
}

pub fn save_adapter(path: &Path, adapted: &AdaptedPolicy) -> Result<()> {
    write_file(path, &encode_adapter(adapted))
}

pub fn load_adapter(path: &Path, base: PolicyParams) -> Result<AdaptedPolicy> {
    decode_adapter(&read_file(path)?, base)
}

/// Serialize rows as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format {
            kind: "csv",
            reason: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        kind: "csv",
        reason: e.to_string(),
    })?;
    write_file(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        kind: "csv",
        reason: format!("{}: {e}", path.display()),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                kind: "csv",
                reason: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterConfig;
    use crate::envs::{generate_dataset, EnvConfig, OBS_DIM};
    use crate::numerics::Rng;

    fn small_policy(seed: u64) -> PolicyParams {
        let ds = generate_dataset(&EnvConfig::point_reach(), 3, 8, seed).unwrap();
        let mut p = PolicyParams::init(
            ChunkSpec::default(),
            OBS_DIM,
            &[8, 8],
            Normalizer::from_dataset(&ds).unwrap(),
            &mut Rng::new(seed, 2),
        )
        .unwrap();
        round_to_f32(&mut p);
        p
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let ds = generate_dataset(&EnvConfig::point_reach(), 4, 8, 3).unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn policy_round_trip_is_bitwise() {
        let mut p = small_policy(1);
        p.mask_projection = Some(Matrix::identity(8));
        let back = decode_policy(&encode_policy(&p)).unwrap();
        assert_eq!(back, p);
        let flat = |q: &PolicyParams| q.net.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(flat(&back), flat(&p));
    }

    #[test]
    fn corrupt_or_foreign_headers_are_rejected() {
        let p = small_policy(2);
        let bytes = encode_policy(&p);
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_policy(&wrong), Err(Error::Format { .. })));
        let text = String::from_utf8_lossy(&bytes[..80]).to_string();
        assert!(text.contains("\"schema_version\":1"));
        let bumped: Vec<u8> = {
            let s = bytes.clone();
            let pos = s.windows(17).position(|w| w == b"\"schema_version\":").unwrap() + 17;
            let mut v = s[..pos].to_vec();
            v.push(b'9');
            v.extend_from_slice(&s[pos + 1..]);
            v
        };
        match decode_policy(&bumped) {
            Err(Error::SchemaVersion { found, expected, .. }) => assert_eq!((found, expected), (9, 1)),
            other => panic!("expected a version error, got {other:?}"),
        }
        let msg = decode_policy(&bumped).unwrap_err().to_string();
        assert!(msg.contains('9') && msg.contains('1'));
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { .. })));
        assert!(decode_policy(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn adapter_round_trip_and_base_hash() {
        let base = small_policy(3);
        let mut a = AdaptedPolicy::attach(base.clone(), &AdapterConfig::default(), &mut Rng::new(4, 4)).unwrap();
        for pair in &mut a.pairs {
            pair.up
                .as_mut_slice()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i as f32 * 0.25) as f64);
            pair.down.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let bytes = encode_adapter(&a);
        let back = decode_adapter(&bytes, base.clone()).unwrap();
        assert_eq!(back, a);
        let other = small_policy(5);
        assert!(matches!(decode_adapter(&bytes, other), Err(Error::BaseHash { .. })));
    }
}
