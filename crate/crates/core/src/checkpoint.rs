//! Single-file binary checkpoint.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "ATTRCKPT" | u8 version | u8 value width (4 or 8)
//! u32 len | config TOML
//! u64 optimizer steps | u64 epochs | u64 engine steps
//! u32 tensor count
//! per tensor: u16 name len | name | u8 trainable | u8 rank | u32 dims...
//!             values; trainable tensors then carry u64 moment steps, m, v
//! ```
//!
//! Values are stored at the build's scalar width so that a reloaded model
//! reproduces forward outputs bit for bit.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::{AdamW, Moments, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"ATTRCKPT";
pub const FORMAT_VERSION: u8 = 1;
const WIDTH: u8 = std::mem::size_of::<Scalar>() as u8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
    pub moments: Option<Moments>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u8,
    /// Echo of the run configuration with machine-local paths cleared.
    pub config: RunConfig,
    pub optimizer_steps: u64,
    pub epochs: u64,
    pub engine_steps: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Config echo without data, checkpoint or log locations.
pub fn portable_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.data_dir = "".into();
    c.checkpoint = "".into();
    c.log = None;
    c
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, model: &ModelState, opt: &AdamW, epochs: u64, engine_steps: u64) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(id, name, t)| {
                let mut tensor = Tensor::new(t.shape(), t.data().to_vec()).expect("valid shape");
                tensor.requires_grad = false;
                TensorEntry {
                    name: name.to_string(),
                    trainable: t.requires_grad,
                    tensor,
                    moments: opt.moments.iter().find(|(p, _)| *p == id).map(|(_, m)| m.clone()),
                }
            })
            .collect();
        Self {
            version: FORMAT_VERSION,
            config: portable_config(cfg),
            optimizer_steps: opt.step,
            epochs,
            engine_steps,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.push(self.version);
        b.push(WIDTH);
        let cfg = self.config.to_toml();
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        for v in [self.optimizer_steps, self.epochs, self.engine_steps] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for e in &self.tensors {
            b.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.push(e.trainable as u8);
            b.push(e.tensor.rank() as u8);
            for &d in e.tensor.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_values(&mut b, e.tensor.data());
            if e.trainable {
                let zeros;
                let m = match &e.moments {
                    Some(m) => m,
                    None => {
                        zeros = Moments::zeros(e.tensor.len());
                        &zeros
                    }
                };
                b.extend_from_slice(&m.steps.to_le_bytes());
                put_values(&mut b, &m.m);
                put_values(&mut b, &m.v);
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(r.bad("not a checkpoint file"));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let width = r.u8()?;
        if width != WIDTH {
            return Err(Error::Incompatible(format!(
                "checkpoint stores {}-bit values, this build uses {}-bit",
                width * 8,
                WIDTH * 8
            )));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| r.bad("config echo is not UTF-8"))?;
        let config = RunConfig::parse(text)?;
        let optimizer_steps = r.u64()?;
        let epochs = r.u64()?;
        let engine_steps = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("tensor name is not UTF-8"))?;
            let trainable = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let tensor = Tensor::new(&shape, r.values(numel)?)?;
            let moments = if trainable {
                let steps = r.u64()?;
                Some(Moments {
                    m: r.values(numel)?,
                    v: r.values(numel)?,
                    steps,
                })
            } else {
                None
            };
            tensors.push(TensorEntry {
                name,
                trainable,
                tensor,
                moments,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes"));
        }
        Ok(Self {
            version,
            config,
            optimizer_steps,
            epochs,
            engine_steps,
            tensors,
        })
    }

    /// Writes through a temporary file so an existing checkpoint survives a
    /// failed write.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies stored values (and moments, when `opt` is given) into a model
    /// built from the same configuration.
    pub fn restore_into(&self, model: &mut ModelState, opt: Option<&mut AdamW>) -> Result<()> {
        if self.tensors.len() != model.store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for e in &self.tensors {
            let id = model.store.id(&e.name).ok_or_else(|| {
                Error::Incompatible(format!("checkpoint tensor {} is not part of the model", e.name))
            })?;
            let t = model.store.get_mut(id);
            if t.shape() != e.tensor.shape() || t.requires_grad != e.trainable {
                return Err(Error::Incompatible(format!(
                    "tensor {}: checkpoint {:?}, model {:?}",
                    e.name,
                    e.tensor.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(e.tensor.data());
        }
        if let Some(opt) = opt {
            opt.step = self.optimizer_steps;
            for (id, m) in &mut opt.moments {
                let name = model.store.name(*id);
                if let Some(stored) = self.tensors.iter().find(|e| e.name == name).and_then(|e| e.moments.clone()) {
                    *m = stored;
                }
            }
        }
        Ok(())
    }
}

fn put_values(b: &mut Vec<u8>, values: &[Scalar]) {
    for v in values {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: &str) -> Error {
        Error::Incompatible(format!("{}: {reason} at byte {}", self.origin.display(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(self.bad("unexpected end of file"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<Scalar>> {
        let w = WIDTH as usize;
        let raw = self.take(n * w)?;
        Ok(raw
            .chunks_exact(w)
            .map(|c| Scalar::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Mode;
    use crate::numerics::{Graph, RngState};

    fn toy_model() -> (RunConfig, ModelState) {
        let mut cfg = RunConfig::toy();
        cfg.model.dim = 8;
        let specs: Vec<_> = cfg
            .datasets
            .iter()
            .map(|d| {
                let mut s = d.spec();
                s.positive_rates = vec![0.5; s.attribute_count()];
                s
            })
            .collect();
        let m = ModelState::new(&cfg.model, &specs, &cfg.query_modes(), 605).unwrap();
        (cfg, m)
    }

    #[test]
    fn save_load_save_is_byte_identical_and_forward_matches() {
        let (cfg, mut model) = toy_model();
        let mut opt = AdamW::new(&model.store, cfg.adamw());
        for id in model.store.trainable_ids() {
            let n = model.store.get(id).len();
            model.store.get_mut(id).grad = Some(RngState::new(id.index() as u64).gaussian_vec(n, 1.0));
        }
        opt.step(&mut model.store, 1e-3).unwrap();
        let ck = Checkpoint::capture(&cfg, &model, &opt, 1, 7);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let (_, mut fresh) = toy_model();
        let mut fresh_opt = AdamW::new(&fresh.store, cfg.adamw());
        back.restore_into(&mut fresh, Some(&mut fresh_opt)).unwrap();
        assert_eq!(fresh_opt, opt);
        let id = fresh.dataset_ids()[2].clone();
        let spec = fresh.spec(&id).unwrap().clone();
        let frames = Tensor::new(
            &[spec.frame_count, 3, spec.height, spec.width],
            RngState::new(9).gaussian_vec(spec.frame_len(), 1.0),
        )
        .unwrap();
        let run = |m: &ModelState| {
            let mut g = Graph::new();
            let p = m.forward(&mut g, &[&frames, &frames], &id, Mode::Eval).unwrap();
            g.value(p.probs).data().to_vec()
        };
        assert_eq!(run(&fresh), run(&model));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (cfg, model) = toy_model();
        let opt = AdamW::new(&model.store, cfg.adamw());
        let bytes = Checkpoint::capture(&cfg, &model, &opt, 0, 0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense", Path::new("x")).is_err());
    }
}
