use std::path::Path;

use crate::engine::{Element, Moments, Tensor};
use crate::error::{Error, Result};
use crate::io::fnv1a64;
use crate::nets::{build_decoder, build_encoder, Decoder, Encoder, FeatureBank, NetConfig, NetState, RunningStats};
use crate::trainer::EpochLosses;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters and batch-norm running statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSnapshot {
    pub params: Vec<(String, Tensor<f32>)>,
    pub running: Vec<(String, RunningStats<f32>)>,
}

impl NetSnapshot {
    pub fn of(state: &NetState<f32>) -> Self {
        NetSnapshot {
            params: state
                .params()
                .iter()
                .map(|(k, t)| {
                    (k.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor"))
                })
                .collect(),
            running: state.running().map(|(k, r)| (k.to_string(), r.clone())).collect(),
        }
    }
}

/// Phase-2 state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub epoch: u64,
    pub bank_checksum: u64,
    /// [`Encoder::checksum`] of the frozen encoder, front end included.
    pub encoder_checksum: u64,
    pub encoder: NetSnapshot,
    pub decoder: NetSnapshot,
    pub lr: f64,
    pub step_count: u64,
    pub moments: Vec<(String, Moments<f32>)>,
    /// Test stimuli withheld from the response cycle.
    pub excluded: Vec<u64>,
    pub history: Vec<EpochLosses>,
}

impl Checkpoint {
    /// Rebuilds the frozen encoder.
    pub fn restore_encoder(&self, net: &NetConfig, bank: &FeatureBank) -> Result<Encoder> {
        let mut enc = build_encoder(net, bank, 0)?;
        enc.state_mut().load_from(self.encoder.params.clone(), self.encoder.running.clone())?;
        enc.freeze();
        if enc.checksum() != self.encoder_checksum {
            return Err(Error::Checkpoint("restored encoder does not match its recorded checksum".into()));
        }
        Ok(enc)
    }

    pub fn restore_decoder(&self, net: &NetConfig) -> Result<Decoder> {
        let mut dec = build_decoder(net, 0)?;
        dec.state_mut().load_from(self.decoder.params.clone(), self.decoder.running.clone())?;
        Ok(dec)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        put_u64(&mut w, self.config_hash);
        put_u64(&mut w, self.epoch);
        put_u64(&mut w, self.bank_checksum);
        put_u64(&mut w, self.encoder_checksum);
        put_net(&mut w, &self.encoder);
        put_net(&mut w, &self.decoder);
        put_f64(&mut w, self.lr);
        put_u64(&mut w, self.step_count);
        put_u32(&mut w, self.moments.len() as u32);
        for (name, m) in &self.moments {
            put_str(&mut w, name);
            put_vec(&mut w, &m.first);
            put_vec(&mut w, &m.second);
        }
        put_u32(&mut w, self.excluded.len() as u32);
        self.excluded.iter().for_each(|&i| put_u64(&mut w, i));
        put_u32(&mut w, self.history.len() as u32);
        for h in &self.history {
            put_f64(&mut w, h.total);
            for term in [h.supervised, h.ed, h.de] {
                w.push(term.is_some() as u8);
                put_f64(&mut w, term.unwrap_or(0.0));
            }
        }
        let sum = fnv1a64(&w);
        put_u64(&mut w, sum);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checkpoint("checkpoint is truncated or corrupted".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config_hash = r.u64()?;
        let epoch = r.u64()?;
        let bank_checksum = r.u64()?;
        let encoder_checksum = r.u64()?;
        let encoder = r.net()?;
        let decoder = r.net()?;
        let lr = r.f64()?;
        let step_count = r.u64()?;
        let mut moments = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let first = r.vec()?;
            let second = r.vec()?;
            moments.push((name, Moments { first, second }));
        }
        let excluded = (0..r.u32()?).map(|_| r.u64()).collect::<Result<_>>()?;
        let mut history = Vec::new();
        for _ in 0..r.u32()? {
            let total = r.f64()?;
            let mut terms = [None; 3];
            for t in &mut terms {
                let present = r.take(1)?[0] != 0;
                let v = r.f64()?;
                *t = present.then_some(v);
            }
            history.push(EpochLosses { total, supervised: terms[0], ed: terms[1], de: terms[2] });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            bank_checksum,
            encoder_checksum,
            encoder,
            decoder,
            lr,
            step_count,
            moments,
            excluded,
            history,
        })
    }
}

/// Writes a checkpoint file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

/// Reads a checkpoint and, when `expected_hash` is given, refuses one
/// written under a different configuration.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_hash: Option<u64>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_bytes(&std::fs::read(path)?)?;
    if let Some(h) = expected_hash {
        if h != ckpt.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {:016x} does not match {h:016x}",
                ckpt.config_hash
            )));
        }
    }
    Ok(ckpt)
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_vec(w: &mut Vec<u8>, v: &[f32]) {
    put_u32(w, v.len() as u32);
    v.iter().for_each(|x| x.write_le(w));
}

fn put_net(w: &mut Vec<u8>, net: &NetSnapshot) {
    put_u32(w, net.params.len() as u32);
    for (name, t) in &net.params {
        put_str(w, name);
        put_u32(w, t.shape().len() as u32);
        t.shape().iter().for_each(|&d| put_u32(w, d as u32));
        t.data().iter().for_each(|x| x.write_le(w));
    }
    put_u32(w, net.running.len() as u32);
    for (name, r) in &net.running {
        put_str(w, name);
        put_vec(w, &r.mean);
        put_vec(w, &r.var);
        put_u64(w, r.updates);
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Checkpoint("checkpoint ends early".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid parameter name".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn vec(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        self.floats(n)
    }

    fn net(&mut self) -> Result<NetSnapshot> {
        let mut params = Vec::new();
        for _ in 0..self.u32()? {
            let name = self.str()?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = self.floats(shape.iter().product())?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.push((name, t));
        }
        let mut running = Vec::new();
        for _ in 0..self.u32()? {
            let name = self.str()?;
            let mean = self.vec()?;
            let var = self.vec()?;
            let updates = self.u64()?;
            running.push((name, RunningStats { mean, var, updates }));
        }
        Ok(NetSnapshot { params, running })
    }
}
