//! Xn-transport analog: bit-exact latent payload codec, handover-request
//! envelope, and an in-process / loopback-TCP transfer path with a latency
//! budget check.

use crate::error::{Error, Result};
use crate::trace::{CellId, UeId};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

/// Latent dimensionality d_z.
pub const LATENT_DIM: usize = 32;
/// Payload size: 32 binary32 values.
pub const PAYLOAD_BYTES: usize = 4 * LATENT_DIM;

pub const ENVELOPE_MAGIC: &[u8; 4] = b"XNHO";
pub const ENVELOPE_VERSION: u8 = 1;

/// Little-endian binary32 in index order, no internal header.
/// Rejects non-finite components: a sender must never emit corrupt state.
pub fn serialize_latent(z: &[f32; LATENT_DIM]) -> Result<[u8; PAYLOAD_BYTES]> {
    let mut out = [0u8; PAYLOAD_BYTES];
    for (i, &v) in z.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::CorruptPayload { slot: i });
        }
        out[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`serialize_latent`]. Rejects wrong lengths and NaN slots so a
/// receiver never ingests corrupt state.
pub fn deserialize_latent(bytes: &[u8]) -> Result<[f32; LATENT_DIM]> {
    if bytes.len() != PAYLOAD_BYTES {
        return Err(Error::PayloadLength {
            expected: PAYLOAD_BYTES,
            got: bytes.len(),
        });
    }
    let mut z = [0.0f32; LATENT_DIM];
    for (i, slot) in z.iter_mut().enumerate() {
        let v = f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::CorruptPayload { slot: i });
        }
        *slot = v;
    }
    Ok(z)
}

/// Handover request envelope. The latent is optional: the Zero-Knowledge
/// path sends the request without it.
#[derive(Debug, Clone, PartialEq)]
pub struct XnHandoverRequest {
    pub ue: UeId,
    pub source: CellId,
    pub target: CellId,
    pub t_star: u64,
    pub latent: Option<[f32; LATENT_DIM]>,
}

impl XnHandoverRequest {
    /// Wire encoding: magic, version, ue, source, target, t_star, has_latent
    /// flag, then the 128-byte payload when present. All integers little-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(4 + 1 + 4 + 4 + 4 + 8 + 1 + PAYLOAD_BYTES);
        out.extend_from_slice(ENVELOPE_MAGIC);
        out.push(ENVELOPE_VERSION);
        out.extend_from_slice(&self.ue.0.to_le_bytes());
        out.extend_from_slice(&self.source.0.to_le_bytes());
        out.extend_from_slice(&self.target.0.to_le_bytes());
        out.extend_from_slice(&self.t_star.to_le_bytes());
        match &self.latent {
            Some(z) => {
                out.push(1);
                out.extend_from_slice(&serialize_latent(z)?);
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<XnHandoverRequest> {
        let fail = |msg: &str| Error::Transport(format!("bad envelope: {msg}"));
        if bytes.len() < 26 {
            return Err(fail("truncated header"));
        }
        if &bytes[0..4] != ENVELOPE_MAGIC {
            return Err(fail("wrong magic"));
        }
        if bytes[4] != ENVELOPE_VERSION {
            return Err(fail("unsupported version"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let ue = UeId(u32_at(5));
        let source = CellId(u32_at(9));
        let target = CellId(u32_at(13));
        let t_star = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
        let latent = match bytes[25] {
            0 => {
                if bytes.len() != 26 {
                    return Err(fail("trailing bytes after latent-absent flag"));
                }
                None
            }
            1 => Some(deserialize_latent(&bytes[26..])?),
            _ => return Err(fail("invalid latent flag")),
        };
        Ok(XnHandoverRequest {
            ue,
            source,
            target,
            t_star,
            latent,
        })
    }
}

/// How [`transfer`] moves the message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    /// Encode + decode in the same process.
    InProcess,
    /// Round trip through a loopback TCP socket (ephemeral port).
    Loopback,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub delivered: XnHandoverRequest,
    pub latency: Duration,
    /// True when latency stayed under the budget. A violation is flagged,
    /// never dropped.
    pub within_budget: bool,
}

/// Delivers a handover request and measures encode + transport + decode
/// wall time against `budget_ms`.
pub fn transfer(
    request: &XnHandoverRequest,
    budget_ms: f64,
    mode: TransportMode,
) -> Result<TransferOutcome> {
    let start = Instant::now();
    let delivered = match mode {
        TransportMode::InProcess => XnHandoverRequest::decode(&request.encode()?)?,
        TransportMode::Loopback => loopback_round_trip(request)?,
    };
    let latency = start.elapsed();
    Ok(TransferOutcome {
        delivered,
        within_budget: latency.as_secs_f64() * 1e3 < budget_ms,
        latency,
    })
}

fn loopback_round_trip(request: &XnHandoverRequest) -> Result<XnHandoverRequest> {
    let listener =
        TcpListener::bind("127.0.0.1:0").map_err(|e| Error::Transport(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?;
    let handle = std::thread::spawn(move || -> Result<Vec<u8>> {
        let (mut conn, _) = listener.accept().map_err(|e| Error::Transport(e.to_string()))?;
        let mut len_buf = [0u8; 4];
        conn.read_exact(&mut len_buf)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let mut buf = vec![0u8; u32::from_le_bytes(len_buf) as usize];
        conn.read_exact(&mut buf)
            .map_err(|e| Error::Transport(e.to_string()))?;
        conn.write_all(&[1]).map_err(|e| Error::Transport(e.to_string()))?;
        Ok(buf)
    });
    let bytes = request.encode()?;
    let mut stream = TcpStream::connect(addr).map_err(|e| Error::Transport(e.to_string()))?;
    stream
        .write_all(&(bytes.len() as u32).to_le_bytes())
        .map_err(|e| Error::Transport(e.to_string()))?;
    stream.write_all(&bytes).map_err(|e| Error::Transport(e.to_string()))?;
    let mut ack = [0u8; 1];
    stream
        .read_exact(&mut ack)
        .map_err(|e| Error::Transport(e.to_string()))?;
    let received = handle
        .join()
        .map_err(|_| Error::Transport("receiver thread panicked".into()))??;
    XnHandoverRequest::decode(&received)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn req(latent: Option<[f32; LATENT_DIM]>) -> XnHandoverRequest {
        XnHandoverRequest {
            ue: UeId(7),
            source: CellId(2),
            target: CellId(5),
            t_star: 123_456,
            latent,
        }
    }

    #[test]
    fn zero_latent_serializes_to_zero_bytes() {
        let bytes = serialize_latent(&[0.0; LATENT_DIM]).unwrap();
        assert_eq!(bytes, [0u8; PAYLOAD_BYTES]);
    }

    #[test]
    fn one_in_slot_zero_matches_ieee754() {
        let mut z = [0.0f32; LATENT_DIM];
        z[0] = 1.0;
        let bytes = serialize_latent(&z).unwrap();
        assert_eq!(&bytes[0..4], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn round_trip_is_bit_exact_for_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xD1CE);
        for _ in 0..10_000 {
            let mut z = [0.0f32; LATENT_DIM];
            for v in z.iter_mut() {
                *v = rng.gen_range(-1e6f32..1e6f32);
            }
            let back = deserialize_latent(&serialize_latent(&z).unwrap()).unwrap();
            for (a, b) in z.iter().zip(&back) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(matches!(
            deserialize_latent(&[0u8; 127]),
            Err(Error::PayloadLength { expected: 128, got: 127 })
        ));
    }

    #[test]
    fn nan_slot_is_named_in_error() {
        let mut z = [0.0f32; LATENT_DIM];
        z[5] = 1.0;
        let mut bytes = serialize_latent(&z).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            deserialize_latent(&bytes),
            Err(Error::CorruptPayload { slot: 5 })
        ));
    }

    #[test]
    fn sender_rejects_non_finite_component() {
        let mut z = [0.0f32; LATENT_DIM];
        z[3] = f32::INFINITY;
        assert!(matches!(
            serialize_latent(&z),
            Err(Error::CorruptPayload { slot: 3 })
        ));
    }

    #[test]
    fn envelope_round_trip_with_and_without_latent() {
        let mut z = [0.0f32; LATENT_DIM];
        for (i, v) in z.iter_mut().enumerate() {
            *v = i as f32 * 0.25 - 3.0;
        }
        for r in [req(Some(z)), req(None)] {
            let decoded = XnHandoverRequest::decode(&r.encode().unwrap()).unwrap();
            assert_eq!(decoded, r);
        }
    }

    #[test]
    fn envelope_rejects_corruption() {
        let mut bytes = req(None).encode().unwrap();
        bytes[0] = b'Y';
        assert!(XnHandoverRequest::decode(&bytes).is_err());
        let bytes = req(Some([0.5; LATENT_DIM])).encode().unwrap();
        assert!(XnHandoverRequest::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn in_process_transfer_is_fast_and_faithful() {
        let r = req(Some([1.5; LATENT_DIM]));
        let out = transfer(&r, 1.0, TransportMode::InProcess).unwrap();
        assert_eq!(out.delivered, r);
        assert!(out.within_budget, "latency {:?}", out.latency);
    }

    #[test]
    fn zero_knowledge_request_delivers_without_latent() {
        let out = transfer(&req(None), 100.0, TransportMode::InProcess).unwrap();
        assert_eq!(out.delivered.latent, None);
    }

    #[test]
    fn loopback_transfer_round_trips() {
        let r = req(Some([-2.25; LATENT_DIM]));
        let out = transfer(&r, 100.0, TransportMode::Loopback).unwrap();
        assert_eq!(out.delivered, r);
    }
}
