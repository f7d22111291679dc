//! Checkpoint file: magic, little-endian u64 header length, JSON header,
//! then the raw little-endian f64 blob (parameters, buffers, optional Adam
//! moments).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamState, ArchitectureSpec, Network, ParamInfo};
use crate::error::{Error, Result};
use crate::pattern::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HMCKPT01";

/// Label standardization applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    /// Mean and population standard deviation; a zero spread maps to 1.
    pub fn of(labels: &[f64]) -> Self {
        let n = labels.len().max(1) as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub dataset_hash: String,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub seed: u64,
    /// Base ids of every pattern the model was fitted or fine-tuned on.
    pub train_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub norm: NormStats,
    pub provenance: TrainProvenance,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: ArchitectureSpec,
    params: Vec<ParamInfo>,
    buffers: Vec<ParamInfo>,
    norm: NormStats,
    provenance: TrainProvenance,
    optimizer: Option<OptimizerHeader>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            norm: NormStats::identity(),
            provenance: TrainProvenance::default(),
            optimizer: None,
        }
    }

    /// Denormalized inference-mode predictions.
    pub fn predict(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self
            .network
            .predict(inputs, n)?
            .into_iter()
            .map(|z| self.norm.denormalize(z))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = &self.network;
        let header = Header {
            architecture: net.arch().clone(),
            params: net.param_info().to_vec(),
            buffers: net.buffer_info().to_vec(),
            norm: self.norm,
            provenance: self.provenance.clone(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.state.step,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * (2 * net.n_params() + net.buffers().len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(net.params());
        put(net.buffers());
        if let Some(a) = &self.optimizer {
            put(&a.state.m);
            put(&a.state.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing HMCKPT01 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).expect("checked length");
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file")));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(e.to_string()))?;
        let mut network = Network::zeros(&header.architecture)?;
        if header.params != network.param_info() || header.buffers != network.buffer_info() {
            return Err(Error::Architecture("tensor layout does not match the architecture".into()));
        }
        let blob = &body[hlen..];
        let (np, nb) = (network.n_params(), network.buffers().len());
        let expect = 8 * (np + nb + if header.optimizer.is_some() { 2 * np } else { 0 });
        if blob.len() != expect {
            return Err(bad(format!("blob has {} bytes, expected {expect}", blob.len())));
        }
        let mut vals = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| vals.by_ref().take(n).collect::<Vec<f64>>();
        let params = take(np);
        let buffers = take(nb);
        network.set_state(params, buffers)?;
        let optimizer = header.optimizer.map(|o| Adam {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            state: AdamState {
                step: o.step,
                m: take(np),
                v: take(np),
            },
        });
        Ok(Self {
            network,
            norm: header.norm,
            provenance: header.provenance,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut net = Network::init(&ArchitectureSpec::desk3(), 5).unwrap();
        let x: Vec<f64> = (0..3 * 4096).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let (_, stats) = net.loss_and_grad(&x, &[0.1, 0.2, 0.3], None).unwrap();
        net.update_running_stats(&stats);
        let mut adam = Adam::new(net.n_params(), 0.9, 0.999, 1e-8);
        let g: Vec<f64> = (0..net.n_params()).map(|i| (i as f64).sin()).collect();
        adam.step(net.params_mut(), &g, 0.01);
        Checkpoint {
            network: net,
            norm: NormStats { mean: 1.25, std: 0.3 },
            provenance: TrainProvenance {
                dataset_hash: "d".into(),
                epoch: 7,
                seed: 3,
                train_ids: vec!["a".into(), "b".into()],
            },
            optimizer: Some(adam),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let x: Vec<f64> = (0..2 * 4096).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let a = ck.predict(&x, 2).unwrap();
        let b = back.predict(&x, 2).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());

        let mut no_opt = ck.clone();
        no_opt.optimizer = None;
        assert_eq!(Checkpoint::from_bytes(&no_opt.to_bytes().unwrap(), &path).unwrap(), no_opt);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10], p).is_err());
        // a header for another architecture
        let other = Checkpoint::new(Network::zeros(&ArchitectureSpec::paper9()).unwrap());
        let mut mixed = other.to_bytes().unwrap();
        mixed.truncate(16 + u64::from_le_bytes(mixed[8..16].try_into().unwrap()) as usize);
        mixed.extend_from_slice(&bytes[16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize..]);
        assert!(Checkpoint::from_bytes(&mixed, p).is_err());
    }

    #[test]
    fn norm_stats() {
        let n = NormStats::of(&[1.0, 3.0]);
        assert_eq!((n.mean, n.std), (2.0, 1.0));
        assert_eq!(n.denormalize(n.normalize(7.5)), 7.5);
        assert_eq!(NormStats::of(&[4.0, 4.0]).std, 1.0);
    }
}
