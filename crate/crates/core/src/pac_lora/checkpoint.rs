//! Flat binary adapter checkpoints.
//!
//! Layout (all integers u32 little-endian, all values f64 little-endian):
//!
//! ```text
//! magic "PACLORA\0" | version | d | k | r | N_a | f | h | n_layers | scale (f64)
//! for each layer:   W0 [d×k], then for each expert: A_i [r×k], B_i [d×r]
//! gate A:           W1 [h×f], b1 [h], W2 [N_a×h], b2 [N_a]
//! gate B:           same as gate A
//! ```
//!
//! `n_layers` counts adapted projections that share one pair of gates; a
//! standalone [`PacLoraLayer`] is stored with `n_layers = 1`. A sidecar
//! manifest lists every block with its shape.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Expert, GatingNet, PacLoraLayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PACLORA\0";
pub const VERSION: u32 = 1;

/// One adapted projection: frozen base weight plus its experts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedWeights {
    pub w0: Tensor,
    pub experts: Vec<Expert>,
}

/// Several adapted projections sharing one pair of gating networks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub layers: Vec<AdaptedWeights>,
    pub gate_a: GatingNet,
    pub gate_b: GatingNet,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub n_experts: usize,
    pub f: usize,
    pub h: usize,
    pub n_layers: usize,
}

impl From<PacLoraLayer> for AdapterCheckpoint {
    fn from(layer: PacLoraLayer) -> Self {
        AdapterCheckpoint {
            layers: vec![AdaptedWeights {
                w0: layer.w0,
                experts: layer.experts,
            }],
            gate_a: layer.gate_a,
            gate_b: layer.gate_b,
            scale: layer.scale,
        }
    }
}

impl AdapterCheckpoint {
    pub fn header(&self) -> Result<Header> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Checkpoint("no adapted layers".into()))?;
        let expert = first
            .experts
            .first()
            .ok_or_else(|| Error::Checkpoint("layer without experts".into()))?;
        let header = Header {
            d: first.w0.rows(),
            k: first.w0.cols(),
            r: expert.a.rows(),
            n_experts: first.experts.len(),
            f: self.gate_a.input_dim(),
            h: self.gate_a.hidden_dim(),
            n_layers: self.layers.len(),
        };
        for (name, t, shape) in self.blocks_with(&header) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "block {name} has shape {:?}, header implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(header)
    }

    /// Every block in serialization order with the shape the header implies.
    fn blocks_with(&self, hd: &Header) -> Vec<(String, &Tensor, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w0"), &layer.w0, vec![hd.d, hd.k]));
            for (i, e) in layer.experts.iter().enumerate() {
                out.push((format!("layer{l}.expert{i}.a"), &e.a, vec![hd.r, hd.k]));
                out.push((format!("layer{l}.expert{i}.b"), &e.b, vec![hd.d, hd.r]));
            }
        }
        for (tag, gate) in [("gate_a", &self.gate_a), ("gate_b", &self.gate_b)] {
            let [w1, b1, w2, b2] = gate.tensors();
            out.push((format!("{tag}.w1"), w1, vec![hd.h, hd.f]));
            out.push((format!("{tag}.b1"), b1, vec![hd.h]));
            out.push((format!("{tag}.w2"), w2, vec![hd.n_experts, hd.h]));
            out.push((format!("{tag}.b2"), b2, vec![hd.n_experts]));
        }
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let hd = self.header()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [VERSION as usize, hd.d, hd.k, hd.r, hd.n_experts, hd.f, hd.h, hd.n_layers] {
            let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("dimension {v} exceeds u32")))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.scale.to_le_bytes());
        for (_, t, _) in self.blocks_with(&hd) {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let [d, k, r, n, f, h, n_layers] = dims;
        if n == 0 || n_layers == 0 {
            return Err(Error::Checkpoint("zero experts or layers".into()));
        }
        let scale = cur.f64()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let w0 = cur.tensor(&[d, k])?;
            let experts = (0..n)
                .map(|_| {
                    Ok(Expert {
                        a: cur.tensor(&[r, k])?,
                        b: cur.tensor(&[d, r])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(AdaptedWeights { w0, experts });
        }
        let mut gate = || -> Result<GatingNet> {
            Ok(GatingNet {
                w1: cur.tensor(&[h, f])?,
                b1: cur.tensor(&[h])?,
                w2: cur.tensor(&[n, h])?,
                b2: cur.tensor(&[n])?,
            })
        };
        let gate_a = gate()?;
        let gate_b = gate()?;
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(AdapterCheckpoint {
            layers,
            gate_a,
            gate_b,
            scale,
        })
    }

    /// Human-readable sidecar listing every block and its shape.
    pub fn manifest(&self) -> Result<String> {
        let hd = self.header()?;
        let mut s = format!(
            "format\tPACLORA\nversion\t{VERSION}\nd\t{}\nk\t{}\nr\t{}\nN_a\t{}\nf\t{}\nh\t{}\nn_layers\t{}\nscale\t{}\n",
            hd.d, hd.k, hd.r, hd.n_experts, hd.f, hd.h, hd.n_layers, self.scale
        );
        for (name, _, shape) in self.blocks_with(&hd) {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("block\t{name}\t{}\n", dims.join("x")));
        }
        Ok(s)
    }

    /// Writes the binary file and `<path>.manifest.txt` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        fs::write(manifest_path(path), self.manifest()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Rebuilds the single-layer form; fails when more than one layer is stored.
    pub fn into_layer(self) -> Result<PacLoraLayer> {
        if self.layers.len() != 1 {
            return Err(Error::Checkpoint(format!(
                "expected one adapted layer, found {}",
                self.layers.len()
            )));
        }
        let l = self.layers.into_iter().next().expect("one layer");
        PacLoraLayer::from_parts(l.w0, l.experts, self.gate_a, self.gate_b, self.scale)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("block too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pac_lora::DEFAULT_ALPHA;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(seed: u64, n: usize) -> PacLoraLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Tensor::randn(vec![8, 6], 1.0, &mut rng);
        let mut l = PacLoraLayer::init(w0, n, 2, DEFAULT_ALPHA, 5, 4, &mut rng).unwrap();
        for e in l.experts_mut() {
            e.b = Tensor::randn(vec![8, 2], 1.0, &mut rng);
        }
        l
    }

    #[test]
    fn header_fields_in_declared_order() {
        let bytes = AdapterCheckpoint::from(layer(1, 3)).encode().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let words: Vec<u32> = bytes[8..40]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![1, 8, 6, 2, 3, 5, 4, 1]);
        let blocks = 8 * 6 + 3 * (2 * 6 + 8 * 2) + 2 * (4 * 5 + 4 + 3 * 4 + 3);
        assert_eq!(bytes.len(), 40 + 8 + 8 * blocks);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = AdapterCheckpoint::from(layer(2, 2)).encode().unwrap();
        assert!(AdapterCheckpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(AdapterCheckpoint::decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(AdapterCheckpoint::decode(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.pacl");
        let ckpt = AdapterCheckpoint::from(layer(3, 3));
        ckpt.save(&path).unwrap();
        let manifest = fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains("block\tlayer0.expert2.b\t8x2"));
        assert!(manifest.contains("N_a\t3"));
        assert_eq!(AdapterCheckpoint::load(&path).unwrap(), ckpt);
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_layer_bit_exactly(seed in 0u64..1000, n in 1usize..5) {
            let l = layer(seed, n);
            let back = AdapterCheckpoint::decode(&AdapterCheckpoint::from(l.clone()).encode().unwrap())
                .unwrap()
                .into_layer()
                .unwrap();
            prop_assert_eq!(back, l);
        }
    }
}
