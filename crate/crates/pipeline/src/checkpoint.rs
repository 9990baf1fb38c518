//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "PUNI"  u32 version
//! str     resolved config text            (str = u32 byte length + UTF-8)
//! u8      stage   u64 completed epochs
//! u32     parameter count, then per parameter:
//!         str name, u32 rank, u32 dims…, f32 data…
//! u64     optimizer steps, u32 moment count, then per entry:
//!         u32 parameter index, u32 length, f32 m…, f32 v…
//! [u8;32] rng seed, u64 stream, u128 word position
//! u8      controller present; if 1:
//!         u8 reward kind, u64 seed, f32 g_prev, f32 r_prev, u64 n_cool,
//!         u32 r_s, u8 g_s, u64 epoch, u8 has event [u64 epoch, f32 γ],
//!         mask set
//! mask set of carried masks               (u32 count, per mask u32 layer + tensor)
//! ```
//!
//! Decoding builds the whole checkpoint in memory first, so a malformed
//! file never yields a partially restored session.

use std::fs;
use std::path::Path;

use parauni_core::ldam::{LdamController, LdamState};
use parauni_core::lim::LayerMaskSet;
use parauni_core::rewards::RewardKind;
use parauni_tensor::{Moments, ParamId, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{config, PipelineError, Result};
use crate::train::{Session, Stage};

pub const MAGIC: &[u8; 4] = b"PUNI";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSnapshot {
    pub kind: RewardKind,
    pub seed: u64,
    pub state: LdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub stage: Stage,
    pub epoch: u64,
    pub params: Vec<(String, Tensor)>,
    pub opt_steps: u64,
    pub moments: Vec<(u32, Moments)>,
    pub rng: RngState,
    pub controller: Option<ControllerSnapshot>,
    pub carried: LayerMaskSet,
}

fn kind_code(k: RewardKind) -> u8 {
    match k {
        RewardKind::Alignment => 0,
        RewardKind::Quality => 1,
        RewardKind::Preference => 2,
    }
}

impl Checkpoint {
    pub fn capture(s: &Session) -> Self {
        let params = s
            .store
            .iter()
            .map(|(_, p)| {
                let plain = Tensor::new(p.value.shape(), p.value.data().to_vec()).expect("shape matches data");
                (p.name.clone(), plain)
            })
            .collect();
        let moments = s
            .store
            .ids()
            .filter_map(|id| s.opt.moments(id).map(|m| (id.index() as u32, m.clone())))
            .collect();
        Self {
            config_text: s.config.to_text(),
            stage: s.stage,
            epoch: s.epoch,
            params,
            opt_steps: s.opt.steps(),
            moments,
            rng: RngState::capture(&s.rng),
            controller: s.ldam.as_ref().map(|c| ControllerSnapshot {
                kind: c.kind,
                seed: c.seed,
                state: c.state.clone(),
            }),
            carried: s.carried.clone(),
        }
    }

    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.config_text)
    }

    /// Rebuilds the session with the checkpoint's own configuration.
    pub fn restore(&self) -> Result<Session> {
        self.restore_with(self.config()?)
    }

    /// Rebuilds the session under `config`, whose model section must match
    /// the stored parameters exactly.
    pub fn restore_with(&self, config: Config) -> Result<Session> {
        let mut s = Session::new(config)?;
        s.begin_stage(self.stage);
        let ids: Vec<ParamId> = s.store.ids().collect();
        let n = ids.len();
        if self.params.len() != n {
            return Err(config_mismatch(format!("{} parameters stored, model has {n}", self.params.len())));
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            let p = s.store.get(ids[i]);
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(config_mismatch(format!(
                    "parameter {i}: stored {name} {:?}, model {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (i, m) in &self.moments {
            let i = *i as usize;
            if i >= n || m.m.len() != self.params[i].1.numel() {
                return Err(config_mismatch(format!("optimizer moments for parameter {i} do not fit")));
            }
        }
        for (i, (_, t)) in self.params.iter().enumerate() {
            s.store
                .value_mut(ids[i])
                .data_mut()
                .copy_from_slice(t.data());
        }
        s.opt.restore(
            self.opt_steps,
            self.moments
                .iter()
                .map(|(i, m)| (ids[*i as usize], m.clone()))
                .collect(),
        );
        s.epoch = self.epoch;
        s.rng = self.rng.restore();
        s.ldam = match &self.controller {
            Some(c) => {
                let shape = s.model.condition_shape();
                let mut ctl =
                    LdamController::new(s.config.ldam.clone(), c.kind, s.model.layers(), &shape, c.seed)?;
                ctl.state = c.state.clone();
                Some(ctl)
            }
            None => None,
        };
        s.carried = self.carried.clone();
        Ok(s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.config_text);
        w.u8(self.stage.number());
        w.u64(self.epoch);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.tensor(t);
        }
        w.u64(self.opt_steps);
        w.u32(self.moments.len() as u32);
        for (i, m) in &self.moments {
            w.u32(*i);
            w.u32(m.m.len() as u32);
            w.f32s(&m.m);
            w.f32s(&m.v);
        }
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        match &self.controller {
            None => w.u8(0),
            Some(c) => {
                w.u8(1);
                w.u8(kind_code(c.kind));
                w.u64(c.seed);
                let st = &c.state;
                w.f32(st.g_prev);
                w.f32(st.r_prev);
                w.u64(st.n_cool);
                w.u32(st.r_s);
                w.u8(st.g_s as u8);
                w.u64(st.epoch);
                match st.last_event {
                    None => w.u8(0),
                    Some((e, g)) => {
                        w.u8(1);
                        w.u64(e);
                        w.f32(g);
                    }
                }
                w.masks(&st.active_masks);
            }
        }
        w.masks(&self.carried);
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let at = r.pos;
        if r.take(4)? != MAGIC {
            return Err(format_err(at, "bad magic, not a checkpoint"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(at, format!("unsupported version {version}, expected {VERSION}")));
        }
        let config_text = r.str()?;
        let at = r.pos;
        let stage = Stage::from_number(r.u8()?).map_err(|_| format_err(at, "bad stage"))?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            params.push((name, r.tensor()?));
        }
        let opt_steps = r.u64()?;
        let count = r.u32()? as usize;
        let mut moments = Vec::new();
        for _ in 0..count {
            let i = r.u32()?;
            let len = r.u32()? as usize;
            let m = r.f32s(len)?;
            let v = r.f32s(len)?;
            moments.push((i, Moments { m, v }));
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let controller = match r.flag()? {
            false => None,
            true => {
                let at = r.pos;
                let kind = match r.u8()? {
                    0 => RewardKind::Alignment,
                    1 => RewardKind::Quality,
                    2 => RewardKind::Preference,
                    k => return Err(format_err(at, format!("bad reward kind {k}"))),
                };
                let seed = r.u64()?;
                let g_prev = r.f32()?;
                let r_prev = r.f32()?;
                let n_cool = r.u64()?;
                let r_s = r.u32()?;
                let g_s = r.flag()?;
                let epoch = r.u64()?;
                let last_event = if r.flag()? { Some((r.u64()?, r.f32()?)) } else { None };
                let active_masks = r.masks()?;
                Some(ControllerSnapshot {
                    kind,
                    seed,
                    state: LdamState {
                        g_prev,
                        r_prev,
                        n_cool,
                        r_s,
                        g_s,
                        epoch,
                        last_event,
                        active_masks,
                    },
                })
            }
        };
        let carried = r.masks()?;
        if r.pos != buf.len() {
            return Err(format_err(r.pos as u64, format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config_text,
            stage,
            epoch,
            params,
            opt_steps,
            moments,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            controller,
            carried,
        })
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(PipelineError::io(&tmp))?;
        fs::rename(&tmp, path).map_err(PipelineError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(PipelineError::io(path))?;
        Self::from_bytes(&buf)
    }
}

fn config_mismatch(msg: String) -> PipelineError {
    config(format!("checkpoint does not match the configured model: {msg}"))
}

fn format_err(offset: impl TryInto<u64>, msg: impl Into<String>) -> PipelineError {
    PipelineError::Format {
        offset: offset.try_into().unwrap_or(u64::MAX),
        msg: msg.into(),
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for &x in v {
            self.f32(x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.f32s(t.data());
    }
    fn masks(&mut self, m: &LayerMaskSet) {
        self.u32(m.masks.len() as u32);
        for (&layer, t) in &m.masks {
            self.u32(layer as u32);
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format_err(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            )
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format_err(at as u64, format!("bad flag byte {v}"))),
        }
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.pos as u64, "length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format_err(at as u64, "invalid UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(format_err(at as u64, format!("implausible tensor rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(at as u64, "tensor size overflow"))?;
        let data = self.f32s(numel)?;
        Tensor::new(&shape, data).map_err(|e| format_err(at as u64, e.to_string()))
    }
    fn masks(&mut self) -> Result<LayerMaskSet> {
        let n = self.u32()?;
        let mut set = LayerMaskSet::new();
        for _ in 0..n {
            let layer = self.u32()? as usize;
            set.insert(layer, self.tensor()?);
        }
        Ok(set)
    }
}
