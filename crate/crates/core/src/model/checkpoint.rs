use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{CnnSpec, Real};
use crate::error::{Error, Result};
use crate::profiles::ProfileKind;

const MAGIC: &[u8; 8] = b"SHDWCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub losses: Vec<f64>,
    pub train_accuracies: Vec<f64>,
    pub examples: usize,
    /// Profile channel the network was trained with, if any.
    #[serde(default)]
    pub profile: Option<ProfileKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: CnnSpec,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
}

/// Trained weights plus the architecture and training history.
///
/// On disk: 8 magic bytes, a little-endian `u32` version, a `u64` header
/// length, a JSON header, then every tensor as little-endian `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: CnnSpec,
    pub tensors: Vec<NamedTensor>,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn from_network<T: Real>(net: &Network<T>, metadata: TrainingMetadata) -> Self {
        let tensors = net
            .spec()
            .parameter_shapes()
            .into_iter()
            .zip(net.params())
            .map(|((name, shape), p)| NamedTensor {
                name,
                shape,
                data: p.iter().map(|v| v.to_f32().expect("finite parameter")).collect(),
            })
            .collect();
        Self {
            spec: *net.spec(),
            tensors,
            metadata,
        }
    }

    pub fn to_network<T: Real>(&self) -> Result<Network<T>> {
        self.validate()?;
        let params = self
            .tensors
            .iter()
            .map(|t| {
                let data: Vec<T> = t.data.iter().map(|&v| T::of(f64::from(v))).collect();
                ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("validated length")
            })
            .collect();
        Network::from_params(self.spec, params)
    }

    /// Checks names, shapes and lengths against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let shapes = self.spec.parameter_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&self.tensors) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
            let n: usize = shape.iter().product();
            if t.data.len() != n {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected {n} values, found {}",
                    t.data.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            spec: self.spec,
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut bytes, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut bytes, &mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| Error::Checkpoint("header length overflows".into()))?;
        if len > bytes.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[..len])?;
        let body = &bytes[len..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if body.len() != 4 * total {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of tensor data, found {}",
                4 * total,
                body.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = 4 * e.offset;
            let chunk = body
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("{}: offset out of range", e.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        let ckpt = Self {
            spec: header.spec,
            tensors,
            metadata: header.metadata,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes through a temporary sibling file and renames it into place, so
    /// a failed write never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = std::path::PathBuf::from(tmp);
        let written = fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&bytes).and_then(|_| f.sync_all()))
            .and_then(|_| fs::rename(&tmp, path));
        written.map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(src: &mut &[u8], dst: &mut [u8]) -> Result<()> {
    src.read_exact(dst)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}

/// Widens a 3-channel checkpoint to 4 input channels. Existing filters keep
/// their RGB weights; each new profile-channel slice is the mean of the three
/// RGB slices of the same filter.
pub fn adapt_first_layer(ckpt: &Checkpoint) -> Result<Checkpoint> {
    ckpt.validate()?;
    if ckpt.spec.input_channels != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            found: ckpt.spec.input_channels,
        });
    }
    let mut spec = ckpt.spec;
    spec.input_channels = 4;
    let mut out = ckpt.clone();
    out.spec = spec;
    let first = &mut out.tensors[0];
    let old_shape = first.shape.clone();
    // conv1.weight is [F, C, kh, kw]; linear dense1.weight is [K, C*S*S].
    let (filters, plane) = match old_shape.len() {
        4 => (old_shape[0], old_shape[2] * old_shape[3]),
        2 => (old_shape[0], old_shape[1] / 3),
        _ => return Err(Error::Checkpoint("unexpected first-layer rank".into())),
    };
    let mut data = Vec::with_capacity(filters * 4 * plane);
    for f in 0..filters {
        let base = f * 3 * plane;
        let rgb = &first.data[base..base + 3 * plane];
        data.extend_from_slice(rgb);
        for i in 0..plane {
            data.push((rgb[i] + rgb[plane + i] + rgb[2 * plane + i]) / 3.0);
        }
    }
    first.data = data;
    first.shape = match old_shape.len() {
        4 => vec![filters, 4, old_shape[2], old_shape[3]],
        _ => vec![filters, 4 * plane],
    };
    out.validate()?;
    Ok(out)
}
