//! Wire format.
//!
//! Everything on the wire is a length-prefixed frame: a `u32` little-endian
//! byte count followed by that many payload bytes. Data frames carry a whole
//! number of little-endian IEEE-754 doubles. All other integers are
//! little-endian as well.
//!
//! Frames used by the protocol:
//!
//! * handshake (worker -> coordinator): `job_id bytes, nodes u32,
//!   data_port u16, pass_done u8` (the job id length is implied by the
//!   frame length);
//! * reply (coordinator -> worker): `rank u32, parent host len u16 + bytes,
//!   parent port u16, child count u8, child endpoints in the same shape`.
//!   A 0-length host marks an absent parent. The sentinel ranks
//!   [`RANK_ABORTED`] and [`RANK_REJECTED`] signal session abort and
//!   registration rejection;
//! * intro (child -> parent on the data plane): `rank u32`;
//! * collective header: `seq u64, vector len u64, op u8` (17 bytes),
//!   exchanged once per collective for mismatch detection;
//! * abort: the single byte `0xFF`, distinguishable from headers (17 bytes)
//!   and data chunks (multiples of 8).

use std::io::{Read, Write};
use std::net::TcpStream;

use super::topology::Endpoint;
use crate::{Error, Result};

pub const RANK_ABORTED: u32 = 0xffff_ffff;
pub const RANK_REJECTED: u32 = 0xffff_fffe;
pub const COLLECTIVE_HEADER_LEN: usize = 17;
pub const ABORT_BYTE: u8 = 0xff;

fn comm_err<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Comm(format!("{ctx}: {e}"))
}

/// Write one frame (single buffered write).
pub fn write_frame(stream: &mut TcpStream, scratch: &mut Vec<u8>, payload: &[u8]) -> Result<()> {
    scratch.clear();
    scratch.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    scratch.extend_from_slice(payload);
    stream
        .write_all(scratch)
        .map_err(comm_err("frame write failed"))
}

/// Read one frame into `buf`; rejects frames longer than `max_len`.
pub fn read_frame_into(stream: &mut TcpStream, buf: &mut Vec<u8>, max_len: usize) -> Result<()> {
    let mut len_bytes = [0u8; 4];
    stream
        .read_exact(&mut len_bytes)
        .map_err(comm_err("frame length read failed"))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    if len > max_len {
        return Err(Error::Protocol(format!(
            "frame of {len} bytes exceeds limit {max_len}"
        )));
    }
    buf.resize(len, 0);
    stream
        .read_exact(buf)
        .map_err(comm_err("frame payload read failed"))?;
    Ok(())
}

pub fn doubles_to_bytes(values: &[f64], out: &mut Vec<u8>) {
    out.clear();
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn bytes_to_doubles(bytes: &[u8], out: &mut [f64]) -> Result<()> {
    if bytes.len() != out.len() * 8 {
        return Err(Error::Protocol(format!(
            "data frame of {} bytes does not hold {} doubles",
            bytes.len(),
            out.len()
        )));
    }
    for (chunk, v) in bytes.chunks_exact(8).zip(out.iter_mut()) {
        *v = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handshake {
    pub job_id: String,
    pub nodes: u32,
    pub data_port: u16,
    pub pass_done: bool,
}

impl Handshake {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.job_id.len() + 7);
        out.extend_from_slice(self.job_id.as_bytes());
        out.extend_from_slice(&self.nodes.to_le_bytes());
        out.extend_from_slice(&self.data_port.to_le_bytes());
        out.push(u8::from(self.pass_done));
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        if payload.len() < 7 {
            return Err(Error::Protocol("handshake frame too short".into()));
        }
        let (job, rest) = payload.split_at(payload.len() - 7);
        let job_id = std::str::from_utf8(job)
            .map_err(|_| Error::Protocol("job id is not valid UTF-8".into()))?
            .to_string();
        let nodes = u32::from_le_bytes(rest[0..4].try_into().unwrap());
        let data_port = u16::from_le_bytes(rest[4..6].try_into().unwrap());
        let pass_done = match rest[6] {
            0 => false,
            1 => true,
            k => return Err(Error::Protocol(format!("bad pass_done flag {k}"))),
        };
        Ok(Handshake {
            job_id,
            nodes,
            data_port,
            pass_done,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Assigned {
        rank: u32,
        parent: Option<Endpoint>,
        children: Vec<Endpoint>,
    },
    Aborted,
    Rejected,
}

fn push_endpoint(out: &mut Vec<u8>, ep: Option<&Endpoint>) {
    match ep {
        Some(ep) => {
            out.extend_from_slice(&(ep.host.len() as u16).to_le_bytes());
            out.extend_from_slice(ep.host.as_bytes());
            out.extend_from_slice(&ep.port.to_le_bytes());
        }
        None => {
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
        }
    }
}

fn take_endpoint<'a>(payload: &'a [u8], at: &mut usize) -> Result<Option<Endpoint>> {
    let need = |n: usize, at: usize| {
        if payload.len() < at + n {
            Err(Error::Protocol("truncated endpoint in reply".into()))
        } else {
            Ok(())
        }
    };
    need(2, *at)?;
    let host_len = u16::from_le_bytes(payload[*at..*at + 2].try_into().unwrap()) as usize;
    *at += 2;
    need(host_len + 2, *at)?;
    let host = std::str::from_utf8(&payload[*at..*at + host_len])
        .map_err(|_| Error::Protocol("endpoint host is not valid UTF-8".into()))?
        .to_string();
    *at += host_len;
    let port = u16::from_le_bytes(payload[*at..*at + 2].try_into().unwrap());
    *at += 2;
    if host_len == 0 {
        Ok(None)
    } else {
        Ok(Some(Endpoint { host, port }))
    }
}

impl Reply {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Reply::Aborted => out.extend_from_slice(&RANK_ABORTED.to_le_bytes()),
            Reply::Rejected => out.extend_from_slice(&RANK_REJECTED.to_le_bytes()),
            Reply::Assigned {
                rank,
                parent,
                children,
            } => {
                out.extend_from_slice(&rank.to_le_bytes());
                push_endpoint(&mut out, parent.as_ref());
                out.push(children.len() as u8);
                for c in children {
                    push_endpoint(&mut out, Some(c));
                }
            }
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        if payload.len() < 4 {
            return Err(Error::Protocol("reply frame too short".into()));
        }
        let rank = u32::from_le_bytes(payload[0..4].try_into().unwrap());
        match rank {
            RANK_ABORTED => return Ok(Reply::Aborted),
            RANK_REJECTED => return Ok(Reply::Rejected),
            _ => {}
        }
        let mut at = 4;
        let parent = take_endpoint(payload, &mut at)?;
        if payload.len() < at + 1 {
            return Err(Error::Protocol("reply missing child count".into()));
        }
        let count = payload[at] as usize;
        at += 1;
        let mut children = Vec::with_capacity(count);
        for _ in 0..count {
            children.push(
                take_endpoint(payload, &mut at)?
                    .ok_or_else(|| Error::Protocol("child endpoint with empty host".into()))?,
            );
        }
        Ok(Reply::Assigned {
            rank,
            parent,
            children,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectiveHeader {
    pub seq: u64,
    pub len: u64,
    pub op: u8,
}

impl CollectiveHeader {
    pub fn encode(&self) -> [u8; COLLECTIVE_HEADER_LEN] {
        let mut out = [0u8; COLLECTIVE_HEADER_LEN];
        out[0..8].copy_from_slice(&self.seq.to_le_bytes());
        out[8..16].copy_from_slice(&self.len.to_le_bytes());
        out[16] = self.op;
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        if payload.len() != COLLECTIVE_HEADER_LEN {
            return Err(Error::Protocol(format!(
                "collective header must be {COLLECTIVE_HEADER_LEN} bytes, got {}",
                payload.len()
            )));
        }
        Ok(CollectiveHeader {
            seq: u64::from_le_bytes(payload[0..8].try_into().unwrap()),
            len: u64::from_le_bytes(payload[8..16].try_into().unwrap()),
            op: payload[16],
        })
    }
}

pub fn encode_intro(rank: u32) -> [u8; 4] {
    rank.to_le_bytes()
}

pub fn decode_intro(payload: &[u8]) -> Result<u32> {
    if payload.len() != 4 {
        return Err(Error::Protocol("intro frame must be 4 bytes".into()));
    }
    Ok(u32::from_le_bytes(payload.try_into().unwrap()))
}
