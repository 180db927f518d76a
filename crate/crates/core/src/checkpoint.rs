//! Versioned little-endian checkpoint files.
//!
//! ```text
//! "PSCN" | u32 version | u32 patch_size | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! Besides the model parameters a checkpoint carries a few reserved tensors:
//! `meta.arch` (layer layout as exact small integers), and when optimizer
//! state is present `adam.config`, `adam.step` and `adam.m/<param>` /
//! `adam.v/<param>`. Values that need more than 24 bits are stored as raw
//! u32 words reinterpreted as f32 bit patterns, so they survive unchanged.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::model::{ArchitectureSpec, Model, ModelParams};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PSCN";
pub const CHECKPOINT_VERSION: u32 = 1;

const ARCH: &str = "meta.arch";
const ADAM_CONFIG: &str = "adam.config";
const ADAM_STEP: &str = "adam.step";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint does not match the architecture: {0}")]
    ShapeMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A trained network together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn words_to_f32(words: &[u32]) -> Vec<f32> {
    words.iter().map(|&w| f32::from_bits(w)).collect()
}

fn split_u64(v: u64) -> [u32; 2] {
    [v as u32, (v >> 32) as u32]
}

fn join_u64(lo: f32, hi: f32) -> u64 {
    lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)
}

fn encode_arch(spec: &ArchitectureSpec) -> Tensor<f32> {
    let mut v = vec![spec.stream_channels.len()];
    v.extend(&spec.stream_channels);
    v.push(spec.stream_pool_after.len());
    v.extend(&spec.stream_pool_after);
    v.push(spec.fusion_channels.len());
    v.extend(&spec.fusion_channels);
    v.extend([spec.fc1_width, spec.num_classes]);
    let words: Vec<u32> = v.iter().map(|&x| x as u32).collect();
    let n = words.len();
    Tensor::new(&[n], words_to_f32(&words)).expect("non-empty")
}

fn decode_arch(t: &Tensor<f32>, patch_size: usize) -> Result<ArchitectureSpec, CheckpointError> {
    let bad = || CheckpointError::Malformed("meta.arch is inconsistent".into());
    let mut it = t.data().iter().map(|v| v.to_bits() as usize);
    let list = |it: &mut dyn Iterator<Item = usize>| -> Result<Vec<usize>, CheckpointError> {
        let n = it.next().ok_or_else(bad)?;
        (0..n).map(|_| it.next().ok_or_else(bad)).collect()
    };
    let stream_channels = list(&mut it)?;
    let stream_pool_after = list(&mut it)?;
    let fusion_channels = list(&mut it)?;
    let fc1_width = it.next().ok_or_else(bad)?;
    let num_classes = it.next().ok_or_else(bad)?;
    if it.next().is_some() {
        return Err(bad());
    }
    Ok(ArchitectureSpec {
        patch_size,
        stream_channels,
        stream_pool_after,
        fusion_channels,
        fc1_width,
        num_classes,
    })
}

impl Checkpoint {
    /// Gradient slots are not part of a checkpoint and are dropped.
    pub fn new(mut model: Model<f32>, optimizer: Option<AdamState<f32>>) -> Self {
        for (_, t) in model.params.iter_mut() {
            t.set_grad(None);
        }
        Self { model, optimizer }
    }

    /// All tensors in file order.
    fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(ARCH.to_string(), encode_arch(&self.model.spec))];
        for (name, t) in self.model.params.iter() {
            out.push((
                name.to_string(),
                Tensor::new(t.shape(), t.data().to_vec()).expect("valid"),
            ));
        }
        if let Some(opt) = &self.optimizer {
            let c = opt.config;
            let words: Vec<u32> = [c.alpha, c.beta1, c.beta2, c.epsilon]
                .iter()
                .flat_map(|v| split_u64(v.to_bits()))
                .collect();
            out.push((
                ADAM_CONFIG.into(),
                Tensor::new(&[8], words_to_f32(&words)).expect("8"),
            ));
            out.push((
                ADAM_STEP.into(),
                Tensor::new(&[2], words_to_f32(&split_u64(opt.step))).expect("2"),
            ));
            for (prefix, moments) in [(ADAM_M, &opt.first_moment), (ADAM_V, &opt.second_moment)] {
                for (name, m) in moments {
                    out.push((
                        format!("{prefix}{name}"),
                        Tensor::new(&[m.len()], m.clone()).expect("non-empty"),
                    ));
                }
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        let tensors = self.tensors();
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.model.spec.patch_size as u32).to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Parses a whole checkpoint; nothing is returned unless every tensor
    /// was read and the parameters match the recorded architecture.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let magic: [u8; 4] = read_array(r)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let patch_size = u32::from_le_bytes(read_array(r)?) as usize;
        let count = u32::from_le_bytes(read_array(r)?);
        let mut tensors: IndexMap<String, Tensor<f32>> = IndexMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Malformed("non-UTF-8 name".into()))?;
            let rank = read_array::<R, 1>(r)?[0] as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| read_array(r).map(|b| u32::from_le_bytes(b) as usize))
                .collect::<Result<_, _>>()?;
            let n = shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
            let data = read_f32s(r, n)?;
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!(
                    "duplicate tensor {name}"
                )));
            }
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }

        let arch = tensors
            .shift_remove(ARCH)
            .ok_or_else(|| CheckpointError::Malformed("missing meta.arch".into()))?;
        let spec = decode_arch(&arch, patch_size)?;
        spec.validate()
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;

        let config = tensors.shift_remove(ADAM_CONFIG);
        let step = tensors.shift_remove(ADAM_STEP);
        let mut first_moment = IndexMap::new();
        let mut second_moment = IndexMap::new();
        let mut params = ModelParams::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix(ADAM_M) {
                first_moment.insert(p.to_string(), t.into_data());
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                second_moment.insert(p.to_string(), t.into_data());
            } else {
                params.insert(name, t);
            }
        }
        params
            .check_against(&spec)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;

        let optimizer = match (config, step) {
            (None, None) if first_moment.is_empty() && second_moment.is_empty() => None,
            (Some(c), Some(s)) if c.len() == 8 && s.len() == 2 => {
                let c = c.data();
                let f = |i: usize| f64::from_bits(join_u64(c[2 * i], c[2 * i + 1]));
                for (name, m) in first_moment.iter().chain(&second_moment) {
                    let expected = params.get(name).map(|t| t.len());
                    if expected != Some(m.len()) {
                        return Err(CheckpointError::ShapeMismatch(format!(
                            "optimizer moment {name}"
                        )));
                    }
                }
                Some(AdamState {
                    config: AdamConfig {
                        alpha: f(0),
                        beta1: f(1),
                        beta2: f(2),
                        epsilon: f(3),
                    },
                    step: join_u64(s.data()[0], s.data()[1]),
                    first_moment,
                    second_moment,
                })
            }
            _ => {
                return Err(CheckpointError::Malformed(
                    "incomplete optimizer state".into(),
                ))
            }
        };
        let model = Model::from_parts(spec, params)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        Ok(Self { model, optimizer })
    }
}

/// Reads `n` little-endian floats without trusting `n` for preallocation,
/// so a corrupted shape cannot trigger a huge allocation.
fn read_f32s<R: Read>(r: &mut R, n: u64) -> Result<Vec<f32>, CheckpointError> {
    let mut bytes = Vec::new();
    r.take(n.saturating_mul(4)).read_to_end(&mut bytes)?;
    if (bytes.len() as u64) < n.saturating_mul(4) {
        return Err(CheckpointError::Truncated);
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
