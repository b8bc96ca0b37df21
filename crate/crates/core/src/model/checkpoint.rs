//! Model directory: `config.txt`, `adapters.pacl` (+ manifest) and
//! `base.bin` holding the remaining named base tensors.

use std::fs;
use std::path::Path;

use super::{ParamKind, ToyModel, ToyModelConfig};
use crate::dataset::io::write_atomic;
use crate::error::{Error, Result};
use crate::pac_lora::checkpoint::{manifest_path, AdaptedWeights, AdapterCheckpoint};
use crate::pac_lora::Expert;
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.txt";
pub const ADAPTER_FILE: &str = "adapters.pacl";
pub const BASE_FILE: &str = "base.bin";
pub const BASE_MAGIC: &[u8; 8] = b"TOYBASE\0";
const BASE_VERSION: u32 = 1;

impl ToyModel {
    /// Adapted projections in order block0.q, block0.v, block1.q, ...
    pub fn adapter_checkpoint(&self) -> AdapterCheckpoint {
        let p = &self.params;
        let adapted = |w0: usize, ex: &[(usize, usize)]| AdaptedWeights {
            w0: p[w0].clone(),
            experts: ex
                .iter()
                .map(|&(a, b)| Expert {
                    a: p[a].clone(),
                    b: p[b].clone(),
                })
                .collect(),
        };
        let layers = self
            .layout
            .blocks
            .iter()
            .flat_map(|b| [adapted(b.wq, &b.q_experts), adapted(b.wv, &b.v_experts)])
            .collect();
        AdapterCheckpoint {
            layers,
            gate_a: self.gate_net(0),
            gate_b: self.gate_net(1),
            scale: self.cfg.scale(),
        }
    }

    fn encode_base(&self) -> Vec<u8> {
        let mut buf = BASE_MAGIC.to_vec();
        let base: Vec<usize> = (0..self.params.len()).filter(|&i| self.info[i].kind == ParamKind::Base).collect();
        buf.extend_from_slice(&BASE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(base.len() as u32).to_le_bytes());
        for i in base {
            let name = self.info[i].name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            let t = &self.params[i];
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(CONFIG_FILE), self.cfg.to_text().as_bytes())?;
        let ck = self.adapter_checkpoint();
        let path = dir.join(ADAPTER_FILE);
        write_atomic(&path, &ck.encode()?)?;
        write_atomic(&manifest_path(&path), ck.manifest()?.as_bytes())?;
        write_atomic(&dir.join(BASE_FILE), &self.encode_base())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = ToyModelConfig::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let mut model = ToyModel::init(&cfg, 0)?;
        let ck = AdapterCheckpoint::load(&dir.join(ADAPTER_FILE))?;
        let expected = model.adapter_checkpoint();
        if ck.header()? != expected.header()? || ck.scale != expected.scale {
            return Err(Error::Checkpoint("adapter header does not match config.txt".into()));
        }
        let blocks = model.layout.blocks.clone();
        let slots = blocks.iter().flat_map(|b| [(b.wq, b.q_experts.clone()), (b.wv, b.v_experts.clone())]);
        for ((w0, ex), layer) in slots.zip(ck.layers) {
            model.params[w0] = layer.w0;
            for ((a, b), e) in ex.into_iter().zip(layer.experts) {
                model.params[a] = e.a;
                model.params[b] = e.b;
            }
        }
        for (which, net) in [(model.layout.gate_a, ck.gate_a), (model.layout.gate_b, ck.gate_b)] {
            for (i, t) in which.into_iter().zip([net.w1, net.b1, net.w2, net.b2]) {
                model.params[i] = t;
            }
        }
        model.decode_base(&fs::read(dir.join(BASE_FILE))?)?;
        Ok(model)
    }

    fn decode_base(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != BASE_MAGIC {
            return Err(Error::Checkpoint("bad base magic".into()));
        }
        if r.u32()? != BASE_VERSION as usize {
            return Err(Error::Checkpoint("unsupported base version".into()));
        }
        let count = r.u32()?;
        let base: Vec<usize> = (0..self.params.len()).filter(|&i| self.info[i].kind == ParamKind::Base).collect();
        if count != base.len() {
            return Err(Error::Checkpoint(format!("base file has {count} tensors, expected {}", base.len())));
        }
        for i in base {
            let n = r.u32()?;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != self.info[i].name {
                return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", self.info[i].name)));
            }
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if shape != self.params[i].shape() {
                return Err(Error::Checkpoint(format!("tensor {} has shape {shape:?}", self.info[i].name)));
            }
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            self.params[i] = Tensor::new(shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in base file".into()));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("base file truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    #[test]
    fn save_load_round_trip() {
        let mut m = ToyModel::init(&tiny(12), 3).unwrap();
        for i in m.expert_b_indices() {
            m.params_mut()[i].data_mut()[0] = 0.5;
        }
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(ToyModel::load(dir.path()).unwrap(), m);
        let manifest = fs::read_to_string(manifest_path(&dir.path().join(ADAPTER_FILE))).unwrap();
        assert!(manifest.contains("n_layers\t4"));
    }

    #[test]
    fn corrupted_base_is_rejected() {
        let m = ToyModel::init(&tiny(12), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let p = dir.path().join(BASE_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(ToyModel::load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
