//! Binary model checkpoint.
//!
//! All integers are little-endian `u64` unless noted, all reals little-endian
//! `f64`. Layout, in order:
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes `FDNFCKPT` |
//! | format version | `u32` (currently 1) |
//! | D, block count B | `u64`, `u64` |
//! | hidden width per coupling layer | B x `u64` |
//! | parameter count P, parameters | `u64`, P x `f64` (flat store order) |
//! | per batch-norm layer | momentum, epsilon, D running means, D running variances |
//! | prior regime | `u8`: 0 standard, 1 discriminative, 2 factorial |
//! | factor count F | `u64` |
//! | per factor | name length, UTF-8 name, width, class count K, K x width means |
//! | training state flag | `u8` (0 absent, 1 present) |
//! | training state | Adam step, epochs done, moment length M, M first moments, M second moments, history length H, H x (nll, prior term, entropy term) |
//!
//! Saving then loading reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{FlowModel, Layer};
use crate::priors::{ClassMeans, LatentPartition, PriorSpec, Regime};
use crate::trainer::{AdamState, EpochRecord, TrainState};

const MAGIC: &[u8; 8] = b"FDNFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub prior: PriorSpec,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let m = &self.model;
        w.u64(m.dim() as u64);
        w.u64(m.blocks() as u64);
        for h in m.hidden_widths() {
            w.u64(h as u64);
        }
        w.f64s_with_len(m.params());
        for layer in m.layers() {
            if let Layer::BatchNorm(bn) = layer {
                w.f64(bn.momentum);
                w.f64(bn.epsilon);
                w.f64s(&bn.running_mean);
                w.f64s(&bn.running_var);
            }
        }
        let p = &self.prior;
        w.0.push(match p.regime() {
            Regime::Standard => 0,
            Regime::Discriminative => 1,
            Regime::Factorial => 2,
        });
        w.u64(p.partition().len() as u64);
        for (f, means) in p.means().iter().enumerate() {
            let name = p.partition().names()[f].as_bytes();
            w.u64(name.len() as u64);
            w.0.extend_from_slice(name);
            w.u64(means.width as u64);
            w.u64(means.classes as u64);
            w.f64s(&means.values);
        }
        match &self.state {
            None => w.0.push(0),
            Some(s) => {
                w.0.push(1);
                w.u64(s.adam.step);
                w.u64(s.epochs_done as u64);
                w.f64s_with_len(&s.adam.m);
                w.f64s(&s.adam.v);
                w.u64(s.history.len() as u64);
                for r in &s.history {
                    w.f64(r.nll);
                    w.f64(r.prior_term);
                    w.f64(r.entropy_term);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let dim = r.usize()?;
        let blocks = r.usize()?;
        if dim < 2 || blocks == 0 {
            return Err(Error::Checkpoint(format!("invalid shape D={dim}, blocks={blocks}")));
        }
        let hidden = (0..blocks).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if hidden.contains(&0) {
            return Err(Error::Checkpoint("zero hidden width".into()));
        }
        let mut model = FlowModel::with_hidden_widths(dim, &hidden);
        let n = r.usize()?;
        if n != model.num_params() {
            return Err(Error::Checkpoint(format!(
                "parameter count {n} does not match architecture ({})",
                model.num_params()
            )));
        }
        let params = r.f64s(n)?;
        model.params_mut().copy_from_slice(&params);
        for layer in model.layers_mut() {
            if let Layer::BatchNorm(bn) = layer {
                bn.momentum = r.f64()?;
                bn.epsilon = r.f64()?;
                bn.running_mean = r.f64s(dim)?;
                bn.running_var = r.f64s(dim)?;
            }
        }
        let regime = match r.take(1)?[0] {
            0 => Regime::Standard,
            1 => Regime::Discriminative,
            2 => Regime::Factorial,
            other => return Err(Error::Checkpoint(format!("unknown prior regime {other}"))),
        };
        let nf = r.usize()?;
        let mut names = Vec::with_capacity(nf);
        let mut widths = Vec::with_capacity(nf);
        let mut means = Vec::with_capacity(nf);
        for _ in 0..nf {
            let len = r.usize()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("factor name is not UTF-8".into()))?;
            let width = r.usize()?;
            let classes = r.usize()?;
            let values = r.f64s(classes.checked_mul(width).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            names.push(name);
            widths.push(width);
            means.push(ClassMeans { classes, width, values });
        }
        let partition = LatentPartition::new(names, &widths).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if partition.dim() != dim {
            return Err(Error::Checkpoint("prior partition does not cover D".into()));
        }
        let prior = PriorSpec::from_parts(regime, partition, means).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let state = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let epochs_done = r.usize()?;
                let len = r.usize()?;
                let m = r.f64s(len)?;
                let v = r.f64s(len)?;
                let h = r.usize()?;
                let mut history = Vec::with_capacity(h.min(1 << 20));
                for epoch in 0..h {
                    history.push(EpochRecord {
                        epoch,
                        nll: r.f64()?,
                        prior_term: r.f64()?,
                        entropy_term: r.f64()?,
                    });
                }
                Some(TrainState {
                    adam: AdamState { step, m, v },
                    epochs_done,
                    history,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad training-state flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { model, prior, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn f64s_with_len(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        self.f64s(vs);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.bytes.len() / 8 {
            return Err(Error::Checkpoint("truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FlowModel::identity(FlowConfig::new(5, 3, 7)).unwrap();
        model.randomize(&mut rng, 0.3);
        let part = LatentPartition::new(["phone", "speaker"], &[3, 2]).unwrap();
        let prior = PriorSpec::factorial(part, &[4, 6], &mut rng).unwrap();
        let n = model.num_params() + prior.num_mean_params();
        let state = TrainState {
            adam: AdamState {
                step: 17,
                m: (0..n).map(|i| i as f64 * 1e-3).collect(),
                v: (0..n).map(|i| (i as f64).sqrt()).collect(),
            },
            epochs_done: 2,
            history: vec![
                EpochRecord { epoch: 0, nll: 1.5, prior_term: -1.0, entropy_term: -0.5 },
                EpochRecord { epoch: 1, nll: 1.25, prior_term: -0.75, entropy_term: -0.5 },
            ],
        };
        let ckpt = Checkpoint { model, prior, state: Some(state) };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let model = FlowModel::identity(FlowConfig::new(4, 2, 3)).unwrap();
        let ckpt = Checkpoint { model, prior: PriorSpec::standard(4), state: None };
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
