//! An in-process cluster: a coordinator plus `m` worker threads, all talking
//! real TCP over loopback. Used by the examples and by tests that want a
//! full multi-node run without spawning processes.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::coordinator::{Coordinator, CoordinatorConfig};
use super::session::{join_tree, JoinConfig, TcpCollective};
use super::Collective;
use crate::{Error, Result};

static NEXT_JOB: AtomicU64 = AtomicU64::new(0);

fn fresh_job_id() -> String {
    let n = NEXT_JOB.fetch_add(1, Ordering::Relaxed);
    format!("local-{}-{n}", std::process::id())
}

/// Run `f(rank, collective)` on `nodes` threads joined into one tree.
///
/// Results are returned indexed by rank. The rank a given thread receives
/// depends on handshake arrival order, so `f` should derive everything from
/// the rank it is handed.
pub fn run_local_nodes<T, F>(nodes: u32, chunk_bytes: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u32, &mut TcpCollective) -> Result<T> + Sync,
{
    let job_id = fresh_job_id();
    let mut cfg = CoordinatorConfig::new(0, nodes, job_id.clone());
    cfg.timeout = Duration::from_secs(30);
    let coordinator = Coordinator::bind(cfg)?;
    let port = coordinator.port();

    std::thread::scope(|s| {
        let coord = s.spawn(move || coordinator.serve(None));

        let workers: Vec<_> = (0..nodes)
            .map(|_| {
                let job_id = job_id.clone();
                let f = &f;
                s.spawn(move || -> Result<(u32, T)> {
                    let mut join_cfg =
                        JoinConfig::new(format!("127.0.0.1:{port}"), job_id, nodes);
                    join_cfg.chunk_bytes = chunk_bytes;
                    let mut coll = join_tree(&join_cfg)?;
                    let rank = coll.rank();
                    let out = f(rank, &mut coll)?;
                    Ok((rank, out))
                })
            })
            .collect();

        let mut slots: Vec<Option<T>> = (0..nodes).map(|_| None).collect();
        let mut first_err = None;
        for h in workers {
            match h
                .join()
                .unwrap_or_else(|_| Err(Error::Comm("worker thread panicked".into())))
            {
                Ok((rank, out)) => slots[rank as usize] = Some(out),
                Err(e) => first_err = first_err.or(Some(e)),
            }
        }
        match coord
            .join()
            .unwrap_or_else(|_| Err(Error::Comm("coordinator thread panicked".into())))
        {
            Ok(_) => {}
            Err(e) => first_err = first_err.or(Some(e)),
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(slots
            .into_iter()
            .map(|s| s.expect("every rank produced a result"))
            .collect())
    })
}

#[cfg(test)]
mod tests {
    use super::super::{ReduceOp, DEFAULT_CHUNK_BYTES};
    use super::*;

    #[test]
    fn three_scalars_sum_to_six() {
        let results = run_local_nodes(3, DEFAULT_CHUNK_BYTES, |rank, coll| {
            coll.allreduce_scalar(f64::from(rank) + 1.0, ReduceOp::Sum)
        })
        .unwrap();
        assert_eq!(results, vec![6.0, 6.0, 6.0]);
    }

    #[test]
    fn two_vectors_sum_elementwise() {
        let results = run_local_nodes(2, DEFAULT_CHUNK_BYTES, |rank, coll| {
            let mut v = if rank == 0 {
                vec![1.0, 2.0]
            } else {
                vec![3.0, 4.0]
            };
            coll.allreduce(&mut v, ReduceOp::Sum)?;
            Ok(v)
        })
        .unwrap();
        assert_eq!(results[0], vec![4.0, 6.0]);
        assert_eq!(results[1], vec![4.0, 6.0]);
    }

    #[test]
    fn max_and_min_scalars() {
        let inputs = [-1.0, 0.0, 5.0];
        let maxes = run_local_nodes(3, DEFAULT_CHUNK_BYTES, |rank, coll| {
            coll.allreduce_scalar(inputs[rank as usize], ReduceOp::Max)
        })
        .unwrap();
        assert!(maxes.iter().all(|&x| x == 5.0));
        let mins = run_local_nodes(3, DEFAULT_CHUNK_BYTES, |rank, coll| {
            coll.allreduce_scalar(inputs[rank as usize], ReduceOp::Min)
        })
        .unwrap();
        assert!(mins.iter().all(|&x| x == -1.0));
    }

    #[test]
    fn collectives_compose_on_one_session() {
        let results = run_local_nodes(4, DEFAULT_CHUNK_BYTES, |rank, coll| {
            let a = coll.allreduce_scalar(1.0, ReduceOp::Sum)?;
            let mut v = vec![f64::from(rank); 5];
            coll.allreduce(&mut v, ReduceOp::Sum)?;
            let b = coll.allreduce_scalar(f64::from(rank), ReduceOp::Max)?;
            Ok((a, v[0], b))
        })
        .unwrap();
        for r in results {
            assert_eq!(r, (4.0, 6.0, 3.0));
        }
    }

    #[test]
    fn length_mismatch_aborts_everywhere() {
        let results = run_local_nodes(3, DEFAULT_CHUNK_BYTES, |rank, coll| {
            let len = if rank == 1 { 5 } else { 4 };
            let mut v = vec![1.0; len];
            Ok(coll.allreduce(&mut v, ReduceOp::Sum).is_err())
        })
        .unwrap();
        assert_eq!(results, vec![true, true, true]);
    }

    #[test]
    fn poisoned_session_stays_failed() {
        run_local_nodes(2, DEFAULT_CHUNK_BYTES, |rank, coll| {
            let len = if rank == 1 { 2 } else { 1 };
            let mut v = vec![1.0; len];
            assert!(coll.allreduce(&mut v, ReduceOp::Sum).is_err());
            assert!(coll.allreduce_scalar(1.0, ReduceOp::Sum).is_err());
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn empty_vector_is_fine() {
        let results = run_local_nodes(2, DEFAULT_CHUNK_BYTES, |_, coll| {
            let mut v: Vec<f64> = vec![];
            coll.allreduce(&mut v, ReduceOp::Sum)?;
            Ok(v.len())
        })
        .unwrap();
        assert_eq!(results, vec![0, 0]);
    }

    #[test]
    fn tiny_chunks_still_reduce_correctly() {
        // chunk_bytes = 16 -> 2 doubles per frame, many chunks.
        let results = run_local_nodes(4, 16, |rank, coll| {
            let mut v: Vec<f64> = (0..37).map(|i| f64::from(rank) + i as f64).collect();
            coll.allreduce(&mut v, ReduceOp::Sum)?;
            Ok(v)
        })
        .unwrap();
        for r in &results {
            for (i, &x) in r.iter().enumerate() {
                assert_eq!(x, 6.0 + 4.0 * i as f64);
            }
        }
    }

    #[test]
    fn solo_session_is_identity() {
        let mut coll = TcpCollective::solo();
        let mut v = vec![1.5, -2.5];
        coll.allreduce(&mut v, ReduceOp::Sum).unwrap();
        assert_eq!(v, vec![1.5, -2.5]);
        assert_eq!(coll.allreduce_scalar(7.0, ReduceOp::Max).unwrap(), 7.0);
        assert_eq!(coll.stats().vector_calls, 1);
        assert_eq!(coll.stats().scalar_calls, 1);
    }
}
