//! Checkpoint file: `PN2NCKPT`, a little-endian `u64` header length, a JSON
//! header (network kind, architecture spec, tensor index, free-form
//! metadata), then every tensor as row-major little-endian `f32`.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Real, UNet, UNetSpec};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PN2NCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    spec: UNetSpec,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `"denoiser"` or `"deblur"`.
    pub kind: String,
    pub spec: UNetSpec,
    pub tensors: Vec<NamedTensor>,
    pub meta: serde_json::Value,
}

fn to_tensor<T: Real>(name: &str, value: &ArrayD<T>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: value.shape().to_vec(),
        data: value.iter().map(|v| v.f64() as f32).collect(),
    }
}

impl Checkpoint {
    pub fn from_net<T: Real>(kind: &str, net: &UNet<T>) -> Self {
        let mut tensors: Vec<NamedTensor> = net.params().iter().map(|p| to_tensor(&p.name, &p.value)).collect();
        tensors.extend(net.buffers().iter().map(|b| to_tensor(&b.name, &b.value)));
        Self {
            kind: kind.to_string(),
            spec: net.spec().clone(),
            tensors,
            meta: serde_json::Value::Null,
        }
    }

    pub fn push_tensor<T: Real>(&mut self, name: &str, value: &ArrayD<T>) {
        self.tensors.retain(|t| t.name != name);
        self.tensors.push(to_tensor(name, value));
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_array<T: Real>(&self, name: &str) -> Result<ArrayD<T>> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.iter().map(|&v| T::cst(v as f64)).collect())
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
    }

    /// Rebuilds the network, checking every weight's name and shape.
    pub fn to_net<T: Real>(&self) -> Result<UNet<T>> {
        let mut net = UNet::new(&self.spec, &mut SeedTree::new(0).rng())?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    /// Copies weights into an existing network of the same architecture.
    pub fn load_into<T: Real>(&self, net: &mut UNet<T>) -> Result<()> {
        if net.spec() != &self.spec {
            return Err(Error::IncompatibleArchitecture(format!(
                "checkpoint spec {:?} does not match network spec {:?}",
                self.spec,
                net.spec()
            )));
        }
        let load = |name: &str, value: &mut ArrayD<T>| -> Result<()> {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::IncompatibleArchitecture(format!("checkpoint lacks tensor {name}")))?;
            if t.shape != value.shape() {
                return Err(Error::IncompatibleArchitecture(format!(
                    "tensor {name}: checkpoint shape {:?}, network shape {:?}",
                    t.shape,
                    value.shape()
                )));
            }
            for (v, &s) in value.iter_mut().zip(&t.data) {
                *v = T::cst(s as f64);
            }
            Ok(())
        };
        for p in net.params_mut() {
            load(&p.name.clone(), &mut p.value)?;
        }
        for b in net.buffers_mut() {
            load(&b.name.clone(), &mut b.value)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
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
            format_version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            spec: self.spec.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                header.format_version
            )));
        }
        let blob = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            let chunk = blob
                .get(4 * e.offset..4 * (e.offset + len))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds blob", e.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            kind: header.kind,
            spec: header.spec,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn round_trip_preserves_outputs() {
        let spec = UNetSpec::deblur(2);
        let mut net = UNet::<f32>::new(&spec, &mut SeedTree::new(4).rng()).unwrap();
        let x = Tensor::from_shape_fn((1, 1, 16, 16), |(_, _, i, j)| ((i * j) % 7) as f32 / 7.0);
        net.forward(&x, true);
        let mut ck = Checkpoint::from_net("deblur", &net);
        ck.push_tensor("bias", &ArrayD::from_elem(IxDyn(&[16, 16]), 0.25f32));
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.to_net::<f32>().unwrap();
        assert_eq!(net.forward(&x, false), restored.forward(&x, false));
        assert_eq!(back.tensor_array::<f32>("bias").unwrap()[[3, 3]], 0.25);
    }

    #[test]
    fn incompatible_spec_rejected() {
        let net = UNet::<f32>::new(&UNetSpec::denoiser(2), &mut SeedTree::new(1).rng()).unwrap();
        let ck = Checkpoint::from_net("denoiser", &net);
        let mut other = UNet::<f32>::new(&UNetSpec::denoiser(4), &mut SeedTree::new(1).rng()).unwrap();
        assert!(matches!(
            ck.load_into(&mut other),
            Err(Error::IncompatibleArchitecture(_))
        ));
        assert!(Checkpoint::decode(b"garbage").is_err());
    }
}
