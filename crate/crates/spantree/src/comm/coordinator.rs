//! The spanning tree server.
//!
//! Serves exactly one job: accepts `nodes` worker handshakes, assigns ranks
//! in arrival order, and sends every worker the endpoints of its parent and
//! children in the binary tree. Workers beyond `nodes`, or with the wrong
//! job id or node count, are rejected. If not all workers register before
//! the timeout, every connected worker is notified and the session aborts.

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::Sender;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::topology::{Endpoint, TreeTopology};
use super::wire::{read_frame_into, write_frame, Handshake, Reply};
use crate::{Error, Result};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(60);
const ACCEPT_POLL: Duration = Duration::from_millis(10);
const HANDSHAKE_READ_TIMEOUT: Duration = Duration::from_secs(10);
const MAX_HANDSHAKE_FRAME: usize = 4096;

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    /// Address to listen on; port 0 picks an ephemeral port.
    pub bind: String,
    pub port: u16,
    pub nodes: u32,
    pub job_id: String,
    pub timeout: Duration,
}

impl CoordinatorConfig {
    pub fn new(port: u16, nodes: u32, job_id: impl Into<String>) -> Self {
        CoordinatorConfig {
            bind: "127.0.0.1".into(),
            port,
            nodes,
            job_id: job_id.into(),
            timeout: DEFAULT_HANDSHAKE_TIMEOUT,
        }
    }
}

/// One registered worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerSlot {
    pub rank: u32,
    pub host: String,
    pub data_port: u16,
    pub pass_done: bool,
}

/// What the coordinator hands back after a successful session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub job_id: String,
    pub nodes: u32,
    pub workers: Vec<WorkerSlot>,
}

/// Progress notifications, consumed by the harness to sequence admissions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoordinatorEvent {
    Registered {
        rank: u32,
        host: String,
        data_port: u16,
    },
    Completed,
    Aborted {
        registered: u32,
    },
}

pub struct Coordinator {
    listener: TcpListener,
    cfg: CoordinatorConfig,
    port: u16,
}

impl Coordinator {
    pub fn bind(cfg: CoordinatorConfig) -> Result<Self> {
        if cfg.nodes == 0 {
            return Err(Error::Argument("node count must be >= 1".into()));
        }
        let addr = format!("{}:{}", cfg.bind, cfg.port);
        let listener = TcpListener::bind(&addr)
            .map_err(|e| Error::Comm(format!("coordinator bind {addr}: {e}")))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Comm(format!("coordinator listener setup: {e}")))?;
        let port = listener
            .local_addr()
            .map_err(|e| Error::Comm(format!("coordinator local_addr: {e}")))?
            .port();
        Ok(Coordinator { listener, cfg, port })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// Run the registration session to completion.
    pub fn serve(self, events: Option<&Sender<CoordinatorEvent>>) -> Result<SessionRecord> {
        let m = self.cfg.nodes;
        let deadline = Instant::now() + self.cfg.timeout;
        let mut scratch = Vec::new();
        let mut slots: Vec<(WorkerSlot, TcpStream)> = Vec::with_capacity(m as usize);

        info!(
            "coordinator: serving job {:?} for {m} nodes on port {}",
            self.cfg.job_id, self.port
        );

        while slots.len() < m as usize {
            if Instant::now() >= deadline {
                warn!(
                    "coordinator: timeout with {}/{} workers registered",
                    slots.len(),
                    m
                );
                for (_, stream) in slots.iter_mut() {
                    let _ = write_frame(stream, &mut scratch, &Reply::Aborted.encode());
                }
                if let Some(tx) = events {
                    let _ = tx.send(CoordinatorEvent::Aborted {
                        registered: slots.len() as u32,
                    });
                }
                return Err(Error::Protocol(format!(
                    "handshake timeout: {}/{} workers registered for job {:?}",
                    slots.len(),
                    m,
                    self.cfg.job_id
                )));
            }
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    match self.register(stream, &peer, &mut scratch, slots.len() as u32) {
                        Ok(Some(entry)) => {
                            if let Some(tx) = events {
                                let _ = tx.send(CoordinatorEvent::Registered {
                                    rank: entry.0.rank,
                                    host: entry.0.host.clone(),
                                    data_port: entry.0.data_port,
                                });
                            }
                            info!(
                                "coordinator: registered rank {} from {} ({}/{})",
                                entry.0.rank,
                                peer,
                                slots.len() + 1,
                                m
                            );
                            slots.push(entry);
                        }
                        Ok(None) => {}
                        Err(e) => debug!("coordinator: dropped a connection: {e}"),
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(ACCEPT_POLL);
                }
                Err(e) => return Err(Error::Comm(format!("coordinator accept: {e}"))),
            }
        }

        // Reject whatever is still queued, then reply to everyone.
        self.drain_and_reject(&mut scratch);

        let endpoints: Vec<Endpoint> = slots
            .iter()
            .map(|(w, _)| Endpoint {
                host: w.host.clone(),
                port: w.data_port,
            })
            .collect();

        for (slot, stream) in slots.iter_mut() {
            let topo = TreeTopology::build(m, slot.rank)?;
            let reply = Reply::Assigned {
                rank: slot.rank,
                parent: topo.parent_rank.map(|p| endpoints[p as usize].clone()),
                children: topo
                    .child_ranks
                    .iter()
                    .map(|&c| endpoints[c as usize].clone())
                    .collect(),
            };
            write_frame(stream, &mut scratch, &reply.encode()).map_err(|e| {
                Error::Comm(format!(
                    "coordinator could not deliver topology to rank {}: {e}",
                    slot.rank
                ))
            })?;
            let _ = stream.flush();
        }

        if let Some(tx) = events {
            let _ = tx.send(CoordinatorEvent::Completed);
        }
        info!("coordinator: tree for job {:?} handed out", self.cfg.job_id);

        Ok(SessionRecord {
            job_id: self.cfg.job_id.clone(),
            nodes: m,
            workers: slots.into_iter().map(|(w, _)| w).collect(),
        })
    }

    /// Read and validate one handshake. Returns `None` when the connection
    /// was rejected (wrong job, wrong node count).
    fn register(
        &self,
        mut stream: TcpStream,
        peer: &std::net::SocketAddr,
        scratch: &mut Vec<u8>,
        next_rank: u32,
    ) -> Result<Option<(WorkerSlot, TcpStream)>> {
        stream
            .set_nonblocking(false)
            .and_then(|_| stream.set_read_timeout(Some(HANDSHAKE_READ_TIMEOUT)))
            .and_then(|_| stream.set_nodelay(true))
            .map_err(|e| Error::Comm(format!("handshake socket setup: {e}")))?;
        let mut buf = Vec::new();
        read_frame_into(&mut stream, &mut buf, MAX_HANDSHAKE_FRAME)?;
        let hs = Handshake::decode(&buf)?;
        if hs.job_id != self.cfg.job_id || hs.nodes != self.cfg.nodes {
            warn!(
                "coordinator: rejecting worker from {peer}: job {:?} nodes {}",
                hs.job_id, hs.nodes
            );
            let _ = write_frame(&mut stream, scratch, &Reply::Rejected.encode());
            return Ok(None);
        }
        Ok(Some((
            WorkerSlot {
                rank: next_rank,
                host: peer.ip().to_string(),
                data_port: hs.data_port,
                pass_done: hs.pass_done,
            },
            stream,
        )))
    }

    /// After the roster is full, anything still in the accept queue is a
    /// duplicate registration and gets a rejection reply.
    fn drain_and_reject(&self, scratch: &mut Vec<u8>) {
        loop {
            match self.listener.accept() {
                Ok((mut stream, peer)) => {
                    warn!("coordinator: roster full, rejecting {peer}");
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_read_timeout(Some(Duration::from_secs(1)));
                    let mut buf = Vec::new();
                    let _ = read_frame_into(&mut stream, &mut buf, MAX_HANDSHAKE_FRAME);
                    let _ = write_frame(&mut stream, scratch, &Reply::Rejected.encode());
                }
                Err(_) => break,
            }
        }
    }
}
