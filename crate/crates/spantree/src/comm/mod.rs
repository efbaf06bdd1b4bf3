//! Tree-structured AllReduce over TCP.
//!
//! A coordinator (the spanning tree server) listens on a well-known port.
//! Workers connect, send a handshake naming the job, and block. Once all `m`
//! workers have registered, the coordinator arranges them into a nearly
//! balanced binary tree (heap layout: rank 0 at the root, rank `r` has
//! children `2r+1` and `2r+2`), tells each worker the endpoints of its
//! parent and children, and gets out of the way. Workers then connect to
//! each other directly and run collectives with no further coordinator
//! involvement.
//!
//! A collective makes two passes over the tree: values flow up and are
//! combined (reduce), then the result flows back down (broadcast). Both
//! phases stream the vector in chunks and run concurrently, so the latency
//! of a long vector approaches wire bandwidth rather than
//! `depth x round-trips`.
//!
//! The reduction order at every node is fixed: left child, right child, own
//! value. Combined with little-endian IEEE-754 doubles on the wire, this
//! makes results bit-for-bit identical across nodes and across runs, which
//! the tests rely on heavily.
//!
//! Failure semantics are deliberately simple: any socket failure or
//! header mismatch aborts the collective on every node and poisons the
//! session. Robustness is provided a level up, by the harness.

pub mod coordinator;
pub mod local;
mod session;
mod topology;
pub mod wire;

pub use coordinator::{Coordinator, CoordinatorConfig, CoordinatorEvent, SessionRecord, WorkerSlot};
pub use session::{join_tree, JoinConfig, TcpCollective};
pub use topology::{Endpoint, TreeTopology};

use crate::Result;

/// Default pipelining chunk size, in bytes of payload per frame.
pub const DEFAULT_CHUNK_BYTES: usize = 65536;

/// Elementwise reduction applied by a collective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

impl ReduceOp {
    pub fn code(self) -> u8 {
        match self {
            ReduceOp::Sum => 0,
            ReduceOp::Max => 1,
            ReduceOp::Min => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ReduceOp::Sum),
            1 => Ok(ReduceOp::Max),
            2 => Ok(ReduceOp::Min),
            k => Err(crate::Error::Protocol(format!("unknown reduce op code {k}"))),
        }
    }

    /// `acc[i] = acc[i] op other[i]`.
    pub fn combine(self, acc: &mut [f64], other: &[f64]) {
        debug_assert_eq!(acc.len(), other.len());
        match self {
            ReduceOp::Sum => {
                for (a, b) in acc.iter_mut().zip(other) {
                    *a += *b;
                }
            }
            ReduceOp::Max => {
                for (a, b) in acc.iter_mut().zip(other) {
                    *a = a.max(*b);
                }
            }
            ReduceOp::Min => {
                for (a, b) in acc.iter_mut().zip(other) {
                    *a = a.min(*b);
                }
            }
        }
    }
}

/// Counters a collective endpoint keeps about its own traffic.
///
/// `payload_bytes_up` counts data payload sent toward the parent, which is
/// the canonical per-node communication figure used by the cost-model
/// checks: one vector collective moves `8 * len` bytes up per non-root node.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CollectiveStats {
    pub vector_calls: u64,
    pub scalar_calls: u64,
    pub payload_bytes_up: u64,
    pub payload_bytes_down: u64,
    pub seconds: f64,
}

/// A per-node collective endpoint. One outstanding collective per session;
/// every participant must call the same sequence of collectives with
/// matching lengths and ops.
pub trait Collective {
    fn rank(&self) -> u32;
    fn nodes(&self) -> u32;

    /// In-place AllReduce: on return, `data` on every node holds the
    /// elementwise reduction of all nodes' inputs, in tree order.
    fn allreduce(&mut self, data: &mut [f64], op: ReduceOp) -> Result<()>;

    /// Single-value AllReduce, used for objective values and consensus.
    fn allreduce_scalar(&mut self, x: f64, op: ReduceOp) -> Result<f64>;

    fn stats(&self) -> CollectiveStats;
}
