//! Worker-side tree membership and the pipelined AllReduce itself.

use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::time::{Duration, Instant};

use log::debug;

use super::topology::TreeTopology;
use super::wire::{
    bytes_to_doubles, decode_intro, doubles_to_bytes, encode_intro, read_frame_into, write_frame,
    CollectiveHeader, Handshake, Reply, ABORT_BYTE, COLLECTIVE_HEADER_LEN,
};
use super::{Collective, CollectiveStats, ReduceOp, DEFAULT_CHUNK_BYTES};
use crate::{Error, Result};

/// Streams stall out after this long; the design has no intra-collective
/// fault tolerance, this just turns a wedged peer into an error eventually.
const IO_TIMEOUT: Duration = Duration::from_secs(600);
const SETUP_READ_TIMEOUT: Duration = Duration::from_secs(30);
/// Bound on reduced chunks buffered at the root between the two phases.
const PIPELINE_DEPTH: usize = 16;

#[derive(Debug, Clone)]
pub struct JoinConfig {
    /// Coordinator `host:port`.
    pub coordinator: String,
    pub job_id: String,
    pub nodes: u32,
    /// Local address for the data-plane listener (an ephemeral port is
    /// chosen and reported to the coordinator in the handshake).
    pub bind: String,
    /// Whether this worker already finished its first pass over the data.
    pub pass_done: bool,
    pub chunk_bytes: usize,
    /// How long to wait for the coordinator reply and for child connections.
    pub timeout: Duration,
}

impl JoinConfig {
    pub fn new(coordinator: impl Into<String>, job_id: impl Into<String>, nodes: u32) -> Self {
        JoinConfig {
            coordinator: coordinator.into(),
            job_id: job_id.into(),
            nodes,
            bind: "127.0.0.1".into(),
            pass_done: false,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            timeout: Duration::from_secs(120),
        }
    }
}

struct Link {
    peer_rank: u32,
    rx: TcpStream,
    tx: TcpStream,
}

impl Link {
    fn new(peer_rank: u32, stream: TcpStream) -> Result<Self> {
        stream
            .set_nodelay(true)
            .and_then(|_| stream.set_read_timeout(Some(IO_TIMEOUT)))
            .and_then(|_| stream.set_write_timeout(Some(IO_TIMEOUT)))
            .map_err(|e| Error::Comm(format!("link socket setup: {e}")))?;
        let rx = stream
            .try_clone()
            .map_err(|e| Error::Comm(format!("link clone: {e}")))?;
        Ok(Link {
            peer_rank,
            rx,
            tx: stream,
        })
    }

    fn shutdown(&self) {
        let _ = self.tx.shutdown(std::net::Shutdown::Both);
    }
}

/// Register with the coordinator, then connect the tree data plane.
///
/// The worker binds its own data listener first, handshakes, learns its
/// rank and the endpoints of its parent and children, connects to the
/// parent (introducing itself with its rank) and accepts its children's
/// introductions.
pub fn join_tree(cfg: &JoinConfig) -> Result<TcpCollective> {
    if cfg.nodes == 0 {
        return Err(Error::Argument("node count must be >= 1".into()));
    }
    let listener = TcpListener::bind((cfg.bind.as_str(), 0))
        .map_err(|e| Error::Comm(format!("data listener bind on {}: {e}", cfg.bind)))?;
    let data_port = listener
        .local_addr()
        .map_err(|e| Error::Comm(format!("data listener addr: {e}")))?
        .port();

    let mut coord = TcpStream::connect(&cfg.coordinator)
        .map_err(|e| Error::Comm(format!("connect coordinator {}: {e}", cfg.coordinator)))?;
    coord
        .set_nodelay(true)
        .and_then(|_| coord.set_read_timeout(Some(cfg.timeout)))
        .map_err(|e| Error::Comm(format!("coordinator socket setup: {e}")))?;

    let hs = Handshake {
        job_id: cfg.job_id.clone(),
        nodes: cfg.nodes,
        data_port,
        pass_done: cfg.pass_done,
    };
    let mut scratch = Vec::new();
    write_frame(&mut coord, &mut scratch, &hs.encode())?;

    let mut buf = Vec::new();
    read_frame_into(&mut coord, &mut buf, 1 << 20)?;
    let (rank, parent_ep, child_eps) = match Reply::decode(&buf)? {
        Reply::Aborted => {
            return Err(Error::Comm("session aborted by coordinator".into()));
        }
        Reply::Rejected => {
            return Err(Error::Protocol(
                "registration rejected by coordinator".into(),
            ));
        }
        Reply::Assigned {
            rank,
            parent,
            children,
        } => (rank, parent, children),
    };
    drop(coord);

    let topology =
        TreeTopology::build(cfg.nodes, rank)?.with_endpoints(parent_ep, child_eps.clone());
    if topology.children.len() != topology.child_ranks.len() {
        return Err(Error::Protocol(format!(
            "coordinator sent {} child endpoints, tree shape wants {}",
            topology.children.len(),
            topology.child_ranks.len()
        )));
    }
    debug!(
        "rank {rank}: parent {:?}, children {:?}",
        topology.parent_rank, topology.child_ranks
    );

    // Upward link.
    let parent = match &topology.parent {
        None => None,
        Some(ep) => {
            let mut stream = TcpStream::connect((ep.host.as_str(), ep.port))
                .map_err(|e| Error::Comm(format!("connect parent {ep}: {e}")))?;
            stream
                .set_nodelay(true)
                .map_err(|e| Error::Comm(format!("parent socket setup: {e}")))?;
            write_frame(&mut stream, &mut scratch, &encode_intro(rank))?;
            Some(Link::new(topology.parent_rank.unwrap(), stream)?)
        }
    };

    // Downward links: accept every child, match introductions to ranks.
    let mut pending = topology.child_ranks.clone();
    let mut links: Vec<Link> = Vec::with_capacity(pending.len());
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Comm(format!("data listener setup: {e}")))?;
    let deadline = Instant::now() + cfg.timeout;
    while !pending.is_empty() {
        match listener.accept() {
            Ok((mut stream, peer)) => {
                stream
                    .set_nonblocking(false)
                    .and_then(|_| stream.set_read_timeout(Some(SETUP_READ_TIMEOUT)))
                    .map_err(|e| Error::Comm(format!("child socket setup: {e}")))?;
                read_frame_into(&mut stream, &mut buf, 64)?;
                let child = decode_intro(&buf)?;
                let Some(at) = pending.iter().position(|&c| c == child) else {
                    return Err(Error::Protocol(format!(
                        "unexpected introduction from rank {child} ({peer})"
                    )));
                };
                pending.remove(at);
                links.push(Link::new(child, stream)?);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Comm(format!(
                        "timed out waiting for child ranks {pending:?}"
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(Error::Comm(format!("data listener accept: {e}"))),
        }
    }
    links.sort_by_key(|l| l.peer_rank);

    Ok(TcpCollective {
        topology,
        parent,
        children: links,
        seq: 0,
        chunk_bytes: cfg.chunk_bytes.max(8),
        stats: CollectiveStats::default(),
        poisoned: false,
    })
}

/// A node's collective endpoint over the established tree.
///
/// Blocking, one collective at a time; not meant to be shared across
/// threads. Any failure poisons the session, mirroring the single-tree
/// design where a node failure fails the whole computation.
pub struct TcpCollective {
    topology: TreeTopology,
    parent: Option<Link>,
    children: Vec<Link>,
    seq: u64,
    chunk_bytes: usize,
    stats: CollectiveStats,
    poisoned: bool,
}

impl TcpCollective {
    /// A session for a single-node job: every collective is the identity.
    pub fn solo() -> Self {
        TcpCollective {
            topology: TreeTopology::build(1, 0).expect("1-node tree"),
            parent: None,
            children: Vec::new(),
            seq: 0,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            stats: CollectiveStats::default(),
            poisoned: false,
        }
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn chunk_bytes(&self) -> usize {
        self.chunk_bytes
    }

    fn shutdown_all(&self) {
        if let Some(p) = &self.parent {
            p.shutdown();
        }
        for c in &self.children {
            c.shutdown();
        }
    }

    fn do_allreduce(&mut self, data: &mut [f64], op: ReduceOp, scalar: bool) -> Result<()> {
        if self.poisoned {
            return Err(Error::Comm(
                "collective session poisoned by an earlier failure".into(),
            ));
        }
        let started = Instant::now();
        let seq = self.seq;
        self.seq += 1;
        if scalar {
            self.stats.scalar_calls += 1;
        } else {
            self.stats.vector_calls += 1;
        }

        if self.parent.is_none() && self.children.is_empty() {
            self.stats.seconds += started.elapsed().as_secs_f64();
            return Ok(());
        }

        let res = run_collective(
            &mut self.parent,
            &mut self.children,
            data,
            op,
            seq,
            self.chunk_bytes,
        );
        match res {
            Ok((up, down)) => {
                self.stats.payload_bytes_up += up;
                self.stats.payload_bytes_down += down;
                self.stats.seconds += started.elapsed().as_secs_f64();
                Ok(())
            }
            Err(e) => {
                self.poisoned = true;
                self.shutdown_all();
                Err(e)
            }
        }
    }
}

impl Collective for TcpCollective {
    fn rank(&self) -> u32 {
        self.topology.rank
    }

    fn nodes(&self) -> u32 {
        self.topology.nodes
    }

    fn allreduce(&mut self, data: &mut [f64], op: ReduceOp) -> Result<()> {
        self.do_allreduce(data, op, false)
    }

    fn allreduce_scalar(&mut self, x: f64, op: ReduceOp) -> Result<f64> {
        let mut buf = [x];
        self.do_allreduce(&mut buf, op, true)?;
        Ok(buf[0])
    }

    fn stats(&self) -> CollectiveStats {
        self.stats
    }
}

enum CollectiveFrame<'a> {
    Abort,
    Payload(&'a [u8]),
}

fn read_collective_frame<'a>(
    stream: &mut TcpStream,
    buf: &'a mut Vec<u8>,
    max_len: usize,
) -> Result<CollectiveFrame<'a>> {
    read_frame_into(stream, buf, max_len)?;
    if buf.len() == 1 && buf[0] == ABORT_BYTE {
        Ok(CollectiveFrame::Abort)
    } else {
        Ok(CollectiveFrame::Payload(buf.as_slice()))
    }
}

fn send_abort(stream: &mut TcpStream) {
    let mut scratch = Vec::new();
    let _ = write_frame(stream, &mut scratch, &[ABORT_BYTE]);
}

fn shutdown_streams(streams: &mut [&mut TcpStream]) {
    for s in streams.iter() {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
}

struct ChunkPlan {
    elems: usize,
    count: usize,
    total: usize,
}

impl ChunkPlan {
    fn range(&self, k: usize) -> std::ops::Range<usize> {
        let lo = k * self.elems;
        lo..(lo + self.elems).min(self.total)
    }
}

/// Reduce phase: ship the header up, verify the children against it, then
/// per chunk read left child, right child, fold in the local values
/// (left, right, self order) and pass the partial reduction to the parent.
/// At the root the finished chunk goes to the broadcast phase instead.
fn reduce_phase(
    parent_tx: &mut Option<&mut TcpStream>,
    child_rx: &mut [&mut TcpStream],
    data: &[f64],
    op: ReduceOp,
    header: CollectiveHeader,
    plan: &ChunkPlan,
    max_frame: usize,
    chunk_out: &SyncSender<Vec<f64>>,
) -> Result<u64> {
    let mut scratch = Vec::new();
    let mut frame = Vec::new();
    let mut payload = Vec::new();
    let mut acc = vec![0.0f64; plan.elems];
    let mut other = vec![0.0f64; plan.elems];
    let mut bytes_up = 0u64;

    if let Some(tx) = parent_tx.as_mut() {
        write_frame(tx, &mut scratch, &header.encode())?;
    }
    for rx in child_rx.iter_mut() {
        match read_collective_frame(rx, &mut frame, COLLECTIVE_HEADER_LEN)? {
            CollectiveFrame::Abort => {
                if let Some(tx) = parent_tx.as_mut() {
                    send_abort(tx);
                }
                return Err(Error::Protocol("collective aborted by peer".into()));
            }
            CollectiveFrame::Payload(bytes) => {
                let child = CollectiveHeader::decode(bytes)?;
                if child != header {
                    if let Some(tx) = parent_tx.as_mut() {
                        send_abort(tx);
                    }
                    return Err(Error::Protocol(format!(
                        "collective mismatch: local(seq={} len={} op={}) \
                         child(seq={} len={} op={})",
                        header.seq, header.len, header.op, child.seq, child.len, child.op
                    )));
                }
            }
        }
    }

    for k in 0..plan.count {
        let range = plan.range(k);
        let len = range.len();
        let own = &data[range];
        let accs = &mut acc[..len];
        if child_rx.is_empty() {
            accs.copy_from_slice(own);
        } else {
            for (c, rx) in child_rx.iter_mut().enumerate() {
                let into: &mut [f64] = if c == 0 { accs } else { &mut other[..len] };
                match read_collective_frame(rx, &mut frame, max_frame)? {
                    CollectiveFrame::Abort => {
                        if let Some(tx) = parent_tx.as_mut() {
                            send_abort(tx);
                        }
                        return Err(Error::Protocol("collective aborted by peer".into()));
                    }
                    CollectiveFrame::Payload(bytes) => bytes_to_doubles(bytes, into)?,
                }
                if c > 0 {
                    op.combine(accs, &other[..len]);
                }
            }
            op.combine(accs, own);
        }
        match parent_tx.as_mut() {
            Some(tx) => {
                doubles_to_bytes(accs, &mut payload);
                write_frame(tx, &mut scratch, &payload)?;
                bytes_up += payload.len() as u64;
            }
            None => chunk_out
                .send(accs.to_vec())
                .map_err(|_| Error::Comm("broadcast phase ended early".into()))?,
        }
    }
    Ok(bytes_up)
}

/// Broadcast phase: receive finished chunks from the parent (at the root,
/// from the reduce phase) and forward them to the children while filling
/// the result buffer.
fn broadcast_phase(
    parent_rx: &mut Option<&mut TcpStream>,
    child_tx: &mut [&mut TcpStream],
    chunk_in: &Receiver<Vec<f64>>,
    plan: &ChunkPlan,
    max_frame: usize,
) -> Result<(Vec<f64>, u64)> {
    let mut result = vec![0.0f64; plan.total];
    let mut frame = Vec::new();
    let mut scratch = Vec::new();
    let mut payload = Vec::new();
    let mut bytes_down = 0u64;

    for k in 0..plan.count {
        let range = plan.range(k);
        match parent_rx.as_mut() {
            None => {
                let chunk = chunk_in
                    .recv()
                    .map_err(|_| Error::Comm("reduce phase ended before broadcast".into()))?;
                result[range].copy_from_slice(&chunk);
                if !child_tx.is_empty() {
                    doubles_to_bytes(&chunk, &mut payload);
                }
            }
            Some(rx) => match read_collective_frame(rx, &mut frame, max_frame)? {
                CollectiveFrame::Abort => {
                    for t in child_tx.iter_mut() {
                        send_abort(t);
                    }
                    return Err(Error::Protocol("collective aborted by peer".into()));
                }
                CollectiveFrame::Payload(bytes) => {
                    bytes_to_doubles(bytes, &mut result[range])?;
                    bytes_down += bytes.len() as u64;
                    payload.clear();
                    payload.extend_from_slice(bytes);
                }
            },
        }
        for t in child_tx.iter_mut() {
            write_frame(t, &mut scratch, &payload)?;
        }
    }
    Ok((result, bytes_down))
}

/// One full reduce+broadcast, pipelined over chunks.
///
/// The reduce phase runs on the calling thread and the broadcast phase on a
/// second thread, so chunks stream down the tree while later chunks are
/// still being summed up it: long vectors cost bandwidth, not
/// depth x round-trips. On failure both threads shut the sockets down,
/// which unblocks every peer; the session is then poisoned.
fn run_collective(
    parent: &mut Option<Link>,
    children: &mut [Link],
    data: &mut [f64],
    op: ReduceOp,
    seq: u64,
    chunk_bytes: usize,
) -> Result<(u64, u64)> {
    let n = data.len();
    let plan = ChunkPlan {
        elems: (chunk_bytes / 8).max(1),
        count: n.div_ceil((chunk_bytes / 8).max(1)),
        total: n,
    };
    let max_frame = plan.elems * 8;
    let header = CollectiveHeader {
        seq,
        len: n as u64,
        op: op.code(),
    };

    // Split each link into its two directions so the phases can run on
    // separate threads. A socket shutdown from either half unblocks the
    // other, which is how errors propagate across phases.
    let (mut parent_tx, mut parent_rx) = match parent.as_mut() {
        Some(Link { rx, tx, .. }) => (Some(tx), Some(rx)),
        None => (None, None),
    };
    let mut child_rx: Vec<&mut TcpStream> = Vec::with_capacity(children.len());
    let mut child_tx: Vec<&mut TcpStream> = Vec::with_capacity(children.len());
    for Link { rx, tx, .. } in children.iter_mut() {
        child_rx.push(rx);
        child_tx.push(tx);
    }

    let (chunk_out, chunk_in) = mpsc::sync_channel::<Vec<f64>>(PIPELINE_DEPTH);

    let (result, up_bytes, down_bytes) =
        std::thread::scope(|s| -> Result<(Vec<f64>, u64, u64)> {
            let plan_ref = &plan;
            let broadcast = s.spawn(move || {
                let res =
                    broadcast_phase(&mut parent_rx, &mut child_tx, &chunk_in, plan_ref, max_frame);
                if res.is_err() {
                    shutdown_streams(&mut child_tx);
                    if let Some(rx) = parent_rx.as_mut() {
                        let _ = rx.shutdown(std::net::Shutdown::Both);
                    }
                }
                res
            });

            let up_res = reduce_phase(
                &mut parent_tx,
                &mut child_rx,
                data,
                op,
                header,
                &plan,
                max_frame,
                &chunk_out,
            );
            drop(chunk_out);
            if up_res.is_err() {
                shutdown_streams(&mut child_rx);
                if let Some(tx) = parent_tx.as_mut() {
                    let _ = tx.shutdown(std::net::Shutdown::Both);
                }
            }
            let down_res = broadcast
                .join()
                .unwrap_or_else(|_| Err(Error::Comm("broadcast thread panicked".into())));
            match (up_res, down_res) {
                (Ok(up), Ok((result, down))) => Ok((result, up, down)),
                (Err(e), _) => Err(e),
                (Ok(_), Err(e)) => Err(e),
            }
        })?;

    data.copy_from_slice(&result);
    Ok((up_bytes, down_bytes))
}
