//! Binary training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCCK" | version u32 | config_len u32 | config TOML | epoch u64 | blocks u32
//! per block: name_len u32 | name | ndim u32 | dims u64 x ndim | data f64 x prod(dims)
//! ```
//!
//! Blocks named `model.*` hold parameters and running statistics,
//! `opt.velocity.*` the momentum buffers and `bank.*` the three banks with
//! their initialization flags (stored as 0.0 / 1.0). Every random stream is
//! derived from the seed and the epoch, so the epoch is the whole RNG state.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryBanks;
use crate::model::ModelParams;
use crate::synthdata::Cursor;
use crate::tensor::Tensor;
use crate::trainer::{OptimizerState, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub banks: MemoryBanks,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer) -> Self {
        Self {
            config: config.clone(),
            epoch: trainer.epoch,
            params: trainer.params.clone(),
            opt: trainer.opt.clone(),
            banks: trainer.banks.clone(),
        }
    }

    pub fn into_trainer(self, cameras: Vec<u16>) -> Result<Trainer> {
        Trainer::from_state(
            self.params,
            self.banks,
            self.opt,
            &self.config.train,
            self.epoch,
            cameras,
        )
    }
}

fn flags(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

fn blocks(ck: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (name, t) in ck.params.named_tensors() {
        out.push((format!("model.{name}"), t.shape().to_vec(), t.data().to_vec()));
    }
    for (name, t) in &ck.opt.velocity {
        out.push((format!("opt.velocity.{name}"), t.shape().to_vec(), t.data().to_vec()));
    }
    let b = &ck.banks;
    let (n, d, s) = (b.len(), b.dim(), b.stripes());
    let (gi, li, mt) = b.init_flags();
    out.push(("bank.global".into(), vec![n, d], b.global_data().to_vec()));
    out.push(("bank.local".into(), vec![n, s, d], b.local_data().to_vec()));
    out.push(("bank.mixture".into(), vec![n, d], b.mixture_data().to_vec()));
    out.push(("bank.global_init".into(), vec![n], flags(gi)));
    out.push(("bank.local_init".into(), vec![n], flags(li)));
    out.push(("bank.mixture_touched".into(), vec![n], flags(mt)));
    out
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    let config = ck.config.to_toml_string()?;
    let blocks = blocks(ck);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(ck.epoch as u64).to_le_bytes())?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for (name, dims, data) in blocks {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ck)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"SCCK\"".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(cur.fail(format!("unsupported checkpoint version {version}")));
    }
    let config_len = cur.u32("config length")? as usize;
    let config_at = cur.offset();
    let text = std::str::from_utf8(cur.take(config_len, "config")?).map_err(|_| Error::Format {
        offset: config_at,
        message: "config is not UTF-8".into(),
    })?;
    let config = RunConfig::from_toml_str(text).map_err(|e| Error::Format {
        offset: config_at,
        message: format!("embedded config: {e}"),
    })?;
    let epoch = cur.u64("epoch")? as usize;
    let count = cur.u32("block count")?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>, u64)> = BTreeMap::new();
    for _ in 0..count {
        let at = cur.offset();
        let name_len = cur.u32("block name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "block name")?.to_vec())
            .map_err(|_| cur.fail("block name is not UTF-8"))?;
        let ndim = cur.u32("block rank")? as usize;
        if ndim > 8 {
            return Err(cur.fail(format!("block `{name}` has rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64("block dims")? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l.checked_mul(8).is_some())
            .ok_or_else(|| cur.fail(format!("block `{name}` is too large")))?;
        let raw = cur.take(len * 8, "block data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (dims, data, at)).is_some() {
            return Err(Error::Format {
                offset: at,
                message: format!("duplicate block `{name}`"),
            });
        }
    }
    if !cur.is_done() {
        return Err(cur.fail("trailing bytes after last block"));
    }
    let end = cur.offset();
    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>, u64)> {
        tensors.remove(name).ok_or_else(|| Error::Format {
            offset: end,
            message: format!("missing block `{name}`"),
        })
    };
    let as_format = |at: u64, e: Error| Error::Format {
        offset: at,
        message: e.to_string(),
    };

    let mut params = ModelParams::init(&config.model, 0)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        let (dims, data, at) = take(&format!("model.{name}"))?;
        let t = Tensor::new(dims, data).map_err(|e| as_format(at, e))?;
        params.set_tensor(name, t).map_err(|e| as_format(at, e))?;
    }
    let mut opt = OptimizerState::new(&params);
    for name in params.trainable_names() {
        let (dims, data, at) = take(&format!("opt.velocity.{name}"))?;
        let t = Tensor::new(dims, data).map_err(|e| as_format(at, e))?;
        let slot = opt.velocity.get_mut(&name).expect("velocity for every trainable tensor");
        if t.shape() != slot.shape() {
            return Err(as_format(at, Error::shape("checkpoint", format!("velocity of `{name}`"))));
        }
        *slot = t;
    }

    let (gdims, global, at) = take("bank.global")?;
    if gdims.len() != 2 {
        return Err(as_format(at, Error::shape("checkpoint", "bank.global must be 2-d")));
    }
    let (n, d) = (gdims[0], gdims[1]);
    let (_, local, _) = take("bank.local")?;
    let (_, mixture, _) = take("bank.mixture")?;
    let mut flag = |name: &str| -> Result<Vec<bool>> {
        let (_, v, at) = take(name)?;
        v.into_iter()
            .map(|x| match x {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::Format {
                    offset: at,
                    message: format!("flag value {other} in `{name}`"),
                }),
            })
            .collect()
    };
    let gi = flag("bank.global_init")?;
    let li = flag("bank.local_init")?;
    let mt = flag("bank.mixture_touched")?;
    let banks = MemoryBanks::from_parts(n, d, config.model.stripes, global, local, mixture, gi, li, mt)
        .map_err(|e| as_format(at, e))?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format {
            offset: end,
            message: format!("unexpected block `{name}`"),
        });
    }
    Ok(Checkpoint {
        config,
        epoch,
        params,
        opt,
        banks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = RunConfig::default();
        let params = ModelParams::init(&config.model, 3).unwrap();
        let mut banks = MemoryBanks::new(4, config.model.key_dim, config.model.stripes).unwrap();
        let mut key = vec![0.0; config.model.key_dim];
        key[1] = 1.0;
        banks.update_anchor_global(2, &key).unwrap();
        banks.update_mixture_positives(&[0, 3], Some(&key), None).unwrap();
        let mut opt = OptimizerState::new(&params);
        opt.velocity.get_mut("enc1.bias").unwrap().data_mut()[0] = 0.25;
        Checkpoint {
            config,
            epoch: 7,
            params,
            opt,
            banks,
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(&buf).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = buf.len() - 3;
        match read_checkpoint(&buf[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0 && offset as usize <= cut),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(&extra), Err(Error::Format { .. })));
    }
}
