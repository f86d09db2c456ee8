//! Length-prefixed binary frames.
//!
//! Header (16 bytes, little-endian): `u8 kind` (0 params, 1 quantity,
//! 2 control), `u32 iter`, `u8 step`, `u16 worker`, `u64 payload_len` in
//! bytes. Params and quantity payloads are little-endian `f64` values:
//! params as `μ`, `Σ` row-major, `γ`, `δ`, `σ²`, `β`; quantities as
//! `(BᵀR⁻¹B, BᵀR⁻¹r)`, `(XᵀR⁻¹X, XᵀR⁻¹r)` or
//! `(hess, grad, cross_mu, cross_sigma)` with matrices row-major. A control
//! frame with an empty payload asks the receiver to stop; a non-empty one
//! carries a worker's failure message as UTF-8.

use std::io::{ErrorKind, Read, Write};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{StampedParams, StampedQuantity, StepLabel};
use crate::error::{Error, Result};
use crate::kernel::Smoothness;
use crate::lowrank::{CrossPartials, ModelParams};
use crate::sync::LocalQuantity;

pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Params = 0,
    Quantity = 1,
    Control = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: FrameKind,
    pub iter: u32,
    pub step: StepLabel,
    pub worker: u16,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0] = self.kind as u8;
        b[1..5].copy_from_slice(&self.iter.to_le_bytes());
        b[5] = self.step.as_u8();
        b[6..8].copy_from_slice(&self.worker.to_le_bytes());
        b[8..16].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_LEN]) -> Result<Self> {
        let kind = match b[0] {
            0 => FrameKind::Params,
            1 => FrameKind::Quantity,
            2 => FrameKind::Control,
            k => return Err(Error::Wire(format!("unknown frame kind {k}"))),
        };
        Ok(FrameHeader {
            kind,
            iter: u32::from_le_bytes(b[1..5].try_into().expect("4 bytes")),
            step: StepLabel::from_u8(b[5])?,
            worker: u16::from_le_bytes(b[6..8].try_into().expect("2 bytes")),
            payload_len: u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")),
        })
    }
}

/// A decoded frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Params(StampedParams),
    Quantity(StampedQuantity),
    Shutdown,
}

fn frame(kind: FrameKind, iter: usize, step: StepLabel, worker: usize, payload: Vec<u8>) -> Result<Vec<u8>> {
    let header = FrameHeader {
        kind,
        iter: u32::try_from(iter).map_err(|_| Error::Wire(format!("iteration {iter} does not fit in u32")))?,
        step,
        worker: u16::try_from(worker).map_err(|_| Error::Wire(format!("worker {worker} does not fit in u16")))?,
        payload_len: payload.len() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend(payload);
    Ok(out)
}

fn f64_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn encode_params(p: &StampedParams) -> Result<Vec<u8>> {
    frame(FrameKind::Params, p.iter, p.step, 0, f64_bytes(p.params.to_flat()))
}

pub fn encode_quantity(q: &StampedQuantity) -> Result<Vec<u8>> {
    match &q.payload {
        Err(msg) => frame(FrameKind::Control, q.iter, q.step, q.worker, msg.as_bytes().to_vec()),
        Ok(payload) => {
            let values: Vec<f64> = match payload {
                LocalQuantity::MuSigma { btrb, v } => row_major(btrb).into_iter().chain(v.iter().copied()).collect(),
                LocalQuantity::Gamma { xtrx, v } => row_major(xtrx).into_iter().chain(v.iter().copied()).collect(),
                LocalQuantity::DeltaTheta { grad, hess, cross } => {
                    let mut out: Vec<f64> = hess.transpose().as_slice().to_vec();
                    out.extend(grad.iter());
                    out.extend(row_major(&cross.mu));
                    for s in &cross.sigma {
                        out.extend(row_major(s));
                    }
                    out
                }
            };
            frame(FrameKind::Quantity, q.iter, q.step, q.worker, f64_bytes(values))
        }
    }
}

pub fn encode_shutdown() -> Vec<u8> {
    frame(FrameKind::Control, 0, StepLabel::MuSigma, 0, Vec::new()).expect("zero stamps fit")
}

fn read_f64s(payload: &[u8]) -> Result<Vec<f64>> {
    if !payload.len().is_multiple_of(8) {
        return Err(Error::Wire(format!("payload of {} bytes is not a whole number of f64", payload.len())));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Solves `k² + k = len` for a non-negative integer `k`.
fn square_plus_side(len: usize) -> Option<usize> {
    let k = ((((1 + 4 * len) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (k * k + k == len).then_some(k)
}

fn decode_quantity(h: &FrameHeader, payload: &[u8]) -> Result<StampedQuantity> {
    let v = read_f64s(payload)?;
    let bad = || Error::Wire(format!("{} quantity with {} values has no consistent shape", h.step, v.len()));
    let q = match h.step {
        StepLabel::MuSigma | StepLabel::Gamma => {
            let k = square_plus_side(v.len()).ok_or_else(bad)?;
            let mat = DMatrix::from_row_slice(k, k, &v[..k * k]);
            let vec = DVector::from_column_slice(&v[k * k..]);
            if h.step == StepLabel::MuSigma {
                LocalQuantity::MuSigma { btrb: mat, v: vec }
            } else {
                LocalQuantity::Gamma { xtrx: mat, v: vec }
            }
        }
        StepLabel::DeltaTheta => {
            if v.len() < 12 || (v.len() - 12) % 3 != 0 {
                return Err(bad());
            }
            let m = square_plus_side((v.len() - 12) / 3).ok_or_else(bad)?;
            let hess = Matrix3::from_row_slice(&v[..9]);
            let grad = Vector3::from_row_slice(&v[9..12]);
            let mu = DMatrix::from_row_slice(3, m, &v[12..12 + 3 * m]);
            let base = 12 + 3 * m;
            let sigma = std::array::from_fn(|a| {
                DMatrix::from_row_slice(m, m, &v[base + a * m * m..base + (a + 1) * m * m])
            });
            LocalQuantity::DeltaTheta {
                grad,
                hess,
                cross: CrossPartials { mu, sigma },
            }
        }
    };
    Ok(StampedQuantity {
        payload: Ok(q),
        iter: h.iter as usize,
        step: h.step,
        worker: h.worker as usize,
    })
}

/// Decodes one frame body. Params frames need the model dimensions.
pub fn decode(h: &FrameHeader, payload: &[u8], m: usize, p: usize, nu: Smoothness) -> Result<Message> {
    if payload.len() as u64 != h.payload_len {
        return Err(Error::Wire("payload length does not match the header".into()));
    }
    match h.kind {
        FrameKind::Params => {
            let params = ModelParams::from_flat(&read_f64s(payload)?, m, p, nu)
                .map_err(|e| Error::Wire(format!("bad params frame: {e}")))?;
            Ok(Message::Params(StampedParams {
                params,
                iter: h.iter as usize,
                step: h.step,
            }))
        }
        FrameKind::Quantity => Ok(Message::Quantity(decode_quantity(h, payload)?)),
        FrameKind::Control if payload.is_empty() => Ok(Message::Shutdown),
        FrameKind::Control => Ok(Message::Quantity(StampedQuantity {
            payload: Err(String::from_utf8_lossy(payload).into_owned()),
            iter: h.iter as usize,
            step: h.step,
            worker: h.worker as usize,
        })),
    }
}

/// Reads one frame; `None` on a clean end of stream before a header.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(FrameHeader, Vec<u8>)>> {
    let mut hb = [0u8; HEADER_LEN];
    match r.read_exact(&mut hb) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let h = FrameHeader::from_bytes(&hb)?;
    let len = usize::try_from(h.payload_len).map_err(|_| Error::Wire("payload too large".into()))?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some((h, payload)))
}

pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes)?;
    Ok(())
}
