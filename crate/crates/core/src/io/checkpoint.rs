//! Training checkpoints.
//!
//! ```text
//! "ASLPCKPT"  u16 version
//! section*    [u8; 4] tag, u64 byte length, payload
//! ```
//!
//! Sections appear in the fixed order PARM, ADAM, CALB, SCAL, CONF. All
//! integers and floats are little-endian; CONF is a UTF-8 `key=value` block.

use std::fs;
use std::path::Path;

use crate::aslp::{AdaptiveMode, CalibState, LossAccumulator};
use crate::error::{Error, Result};
use crate::io::config::KeyValues;
use crate::model::{AdamState, ParamTensors, SegmenterParams, Tensor};

pub const MAGIC: &[u8; 8] = b"ASLPCKPT";
pub const VERSION: u16 = 1;
const SECTIONS: [&[u8; 4]; 5] = [b"PARM", b"ADAM", b"CALB", b"SCAL", b"CONF"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SegmenterParams,
    pub adam: AdamState,
    /// Present once an adaptive phase has run.
    pub calib: Option<CalibState>,
    /// Validation accuracy of the baseline; set by baseline training.
    pub ideal_accuracy: Option<f64>,
    /// Total epochs trained across phases.
    pub epochs: u64,
    /// Image size the model was trained on.
    pub image_dims: (usize, usize),
    pub config: KeyValues,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        vs.iter().for_each(|&v| self.f64(v));
    }
    fn tensors(&mut self, t: &ParamTensors) {
        self.u32(t.hidden() as u32);
        for k in Tensor::ALL {
            self.f64s(t.tensor(k));
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl std::fmt::Display) -> Error {
        Error::format(self.path, format!("{detail} at offset {}", self.pos))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(self.fail(format!("vector length {n} exceeds remaining bytes")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensors(&mut self) -> Result<ParamTensors> {
        let hidden = self.u32()? as usize;
        let data: [Vec<f64>; 6] = [self.f64s()?, self.f64s()?, self.f64s()?, self.f64s()?, self.f64s()?, self.f64s()?];
        ParamTensors::from_tensors(hidden, data).map_err(|e| self.fail(e))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => {
                self.f64()?;
                Ok(None)
            }
            1 => Ok(Some(self.f64()?)),
            b => Err(self.fail(format!("invalid option flag {b}"))),
        }
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn encode_calib(w: &mut Writer, calib: &Option<CalibState>) {
    let Some(c) = calib else {
        w.u8(0);
        return;
    };
    w.u8(1);
    w.u8(c.mode.code());
    w.f64(c.eta);
    w.f64(c.lambda);
    w.f64s(&c.alphas);
    w.f64s(&c.betas);
    w.u64(c.accumulators.len() as u64);
    for a in &c.accumulators {
        w.f64(a.sum_truth);
        w.f64(a.sum_perturbed);
        w.u32(a.visits);
    }
}

fn decode_calib(r: &mut Reader, ideal: Option<f64>) -> Result<Option<CalibState>> {
    if r.u8()? == 0 {
        return Ok(None);
    }
    let code = r.u8()?;
    let mode = AdaptiveMode::from_code(code).ok_or_else(|| r.fail(format!("unknown adaptive mode {code}")))?;
    let eta = r.f64()?;
    let lambda = r.f64()?;
    let alphas = r.f64s()?;
    let betas = r.f64s()?;
    let n = r.u64()? as usize;
    if n != alphas.len() || betas.len() != alphas.len() {
        return Err(r.fail("calibration state vectors differ in length"));
    }
    let accumulators = (0..n)
        .map(|_| {
            Ok(LossAccumulator { sum_truth: r.f64()?, sum_perturbed: r.f64()?, visits: r.u32()? })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut state = CalibState::new(mode, 0, 0.0, eta, lambda).map_err(|e| r.fail(e))?;
    state.alphas = alphas;
    state.betas = betas;
    state.accumulators = accumulators;
    state.restore_ideal_accuracy(ideal);
    Ok(Some(state))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<Writer> = (0..SECTIONS.len()).map(|_| Writer::default()).collect();

        sections[0].tensors(self.params.tensors());

        let a = &self.adam;
        let w = &mut sections[1];
        w.f64(a.lr);
        w.f64(a.beta1);
        w.f64(a.beta2);
        w.f64(a.eps);
        w.u64(a.step);
        w.tensors(&a.first);
        w.tensors(&a.second);

        encode_calib(&mut sections[2], &self.calib);

        let w = &mut sections[3];
        w.u8(self.ideal_accuracy.is_some() as u8);
        w.f64(self.ideal_accuracy.unwrap_or(0.0));
        w.u64(self.epochs);
        w.u32(self.image_dims.0 as u32);
        w.u32(self.image_dims.1 as u32);

        sections[4].0.extend_from_slice(self.config.render().as_bytes());

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (tag, body) in SECTIONS.iter().zip(sections) {
            out.extend_from_slice(*tag);
            out.extend_from_slice(&(body.0.len() as u64).to_le_bytes());
            out.extend_from_slice(&body.0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "bad magic (expected ASLPCKPT) at offset 0"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint version {version} is not supported (expected {VERSION})"),
            ));
        }
        let mut bodies = Vec::with_capacity(SECTIONS.len());
        for tag in SECTIONS {
            let found = r.take(4)?;
            if found != tag {
                return Err(r.fail(format!(
                    "expected section {}, found {}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(found)
                )));
            }
            let len = r.u64()? as usize;
            let start = r.pos;
            if len > bytes.len() - start {
                return Err(r.fail(format!("section length {len} exceeds file size")));
            }
            r.take(len)?;
            bodies.push((start, len));
        }
        r.finish()?;
        let section = |i: usize| {
            let (start, len) = bodies[i];
            Reader { bytes: &bytes[..start + len], pos: start, path }
        };

        let mut s = section(0);
        let params = SegmenterParams::from_tensors(s.tensors()?);
        s.finish()?;

        let mut s = section(1);
        let adam = AdamState {
            lr: s.f64()?,
            beta1: s.f64()?,
            beta2: s.f64()?,
            eps: s.f64()?,
            step: s.u64()?,
            first: s.tensors()?,
            second: s.tensors()?,
        };
        s.finish()?;
        if adam.first.hidden() != params.hidden() || adam.second.hidden() != params.hidden() {
            return Err(Error::format(path, "optimizer moments do not match parameter shapes"));
        }

        let mut s = section(3);
        let ideal_accuracy = s.opt_f64()?;
        let epochs = s.u64()?;
        let image_dims = (s.u32()? as usize, s.u32()? as usize);
        s.finish()?;

        let mut s = section(2);
        let calib = decode_calib(&mut s, ideal_accuracy)?;
        s.finish()?;

        let (start, len) = bodies[4];
        let text = std::str::from_utf8(&bytes[start..start + len])
            .map_err(|_| Error::format(path, format!("config block is not UTF-8 at offset {start}")))?;
        let config = KeyValues::parse(text).map_err(|e| Error::format(path, e.to_string()))?;

        Ok(Self { params, adam, calib, ideal_accuracy, epochs, image_dims, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
