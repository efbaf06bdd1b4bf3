//! Binary-tree layout of ranks and the endpoints attached to them.

use crate::{Error, Result};

/// A network address another node can connect to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

/// One node's view of the spanning tree.
///
/// Ranks are laid out as a binary heap: rank 0 is the root, rank `r` has
/// parent `(r-1)/2` and children `2r+1`, `2r+2` (those below `nodes`). The
/// tree is connected, has exactly `nodes` nodes, and its depth is at most
/// `ceil(log2(nodes+1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeTopology {
    pub rank: u32,
    pub nodes: u32,
    pub parent_rank: Option<u32>,
    pub child_ranks: Vec<u32>,
    /// Parent endpoint, filled in by the coordinator reply.
    pub parent: Option<Endpoint>,
    /// Child endpoints, in `child_ranks` order.
    pub children: Vec<Endpoint>,
}

impl TreeTopology {
    /// Pure function of `(nodes, rank)`; endpoints are left empty.
    pub fn build(nodes: u32, rank: u32) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Argument("node count must be >= 1".into()));
        }
        if rank >= nodes {
            return Err(Error::Argument(format!(
                "rank {rank} out of range for {nodes} nodes"
            )));
        }
        Ok(TreeTopology {
            rank,
            nodes,
            parent_rank: Self::parent_rank(rank),
            child_ranks: Self::child_ranks(nodes, rank),
            parent: None,
            children: Vec::new(),
        })
    }

    pub fn parent_rank(rank: u32) -> Option<u32> {
        (rank > 0).then(|| (rank - 1) / 2)
    }

    pub fn child_ranks(nodes: u32, rank: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(2);
        for c in [2 * rank + 1, 2 * rank + 2] {
            if c < nodes {
                out.push(c);
            }
        }
        out
    }

    /// Depth of the whole tree (root alone = 1).
    pub fn depth(nodes: u32) -> u32 {
        (u64::from(nodes) + 1).next_power_of_two().trailing_zeros()
    }

    pub fn with_endpoints(mut self, parent: Option<Endpoint>, children: Vec<Endpoint>) -> Self {
        self.parent = parent;
        self.children = children;
        self
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    pub fn is_leaf(&self) -> bool {
        self.child_ranks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_is_root_and_leaf() {
        let t = TreeTopology::build(1, 0).unwrap();
        assert_eq!(t.parent_rank, None);
        assert!(t.child_ranks.is_empty());
    }

    #[test]
    fn three_nodes_heap_layout() {
        let t = TreeTopology::build(3, 0).unwrap();
        assert_eq!(t.child_ranks, vec![1, 2]);
        assert_eq!(t.parent_rank, None);
        for r in [1, 2] {
            let t = TreeTopology::build(3, r).unwrap();
            assert_eq!(t.parent_rank, Some(0));
            assert!(t.child_ranks.is_empty());
        }
    }

    #[test]
    fn six_nodes_rank_five_is_leaf_under_two() {
        let t = TreeTopology::build(6, 5).unwrap();
        assert_eq!(t.parent_rank, Some(2));
        assert!(t.child_ranks.is_empty());
    }

    #[test]
    fn rank_out_of_range_is_an_error() {
        assert!(TreeTopology::build(4, 4).is_err());
        assert!(TreeTopology::build(0, 0).is_err());
    }

    #[test]
    fn build_is_pure() {
        assert_eq!(
            TreeTopology::build(13, 7).unwrap(),
            TreeTopology::build(13, 7).unwrap()
        );
    }

    #[test]
    fn tree_is_connected_with_bounded_depth() {
        for m in [1u32, 2, 3, 4, 5, 6, 7, 8, 15, 16, 31, 100, 257] {
            // Walk every rank to the root; count hops.
            let mut seen = vec![false; m as usize];
            for r in 0..m {
                let mut cur = r;
                let mut hops = 1;
                while let Some(p) = TreeTopology::parent_rank(cur) {
                    // Parent/child views agree.
                    assert!(TreeTopology::child_ranks(m, p).contains(&cur));
                    cur = p;
                    hops += 1;
                }
                assert_eq!(cur, 0);
                assert!(hops <= TreeTopology::depth(m), "m={m} r={r} hops={hops}");
                seen[r as usize] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }
}
