//! End-to-end training strategies and the worker entry point.
//!
//! Every strategy shares the same shape: some local computation over the
//! shard, punctuated by a handful of collectives. The driver stages are
//! split around tree formation so that speculative execution can gate
//! membership on first-pass completion:
//!
//! 1. [`initial_local_phase`]: everything a worker can do before it knows
//!    its rank (load data; for warmstarted strategies, the first local
//!    pass).
//! 2. Optional harness gate, then [`crate::comm::join_tree`].
//! 3. [`run_after_join`]: the remaining passes, averaging, batch
//!    optimization, reporting.
//!
//! [`run_strategy`] glues 1 and 3 together for in-process use (examples,
//! tests, single node).

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use log::info;

use crate::averaging::{weighted_average_g, weighted_average_w};
use crate::comm::{join_tree, Collective, CollectiveStats, JoinConfig, ReduceOp};
use crate::data::{load_examples, Shard};
use crate::lbfgs::{lbfgs_optimize, write_trace_csv, LbfgsParams, TraceRow};
use crate::loss::{LossKind, Objective};
use crate::metrics::{auprc, Scored};
use crate::model::{save_model, ModelState, Phase};
use crate::online::{plain_sgd_pass, sgd_pass, OnlineConfig};
use crate::{Error, Result};

/// Which learning strategy a worker runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Online warmstart passes, one confidence-weighted average, then
    /// L-BFGS from the averaged point.
    Hybrid { online_passes: u32 },
    /// Online passes with weight and scaling averaging after every pass.
    OnlineRepeated { passes: u32 },
    /// Cold-start L-BFGS (iteration budget comes from [`LbfgsParams`]).
    Batch,
    /// Distributed mini-batch SGD: global batch `batch` (0 = auto,
    /// sqrt(n) rounded to a multiple of m), rate `1/(L + gamma sqrt(t/m))`.
    Minibatch {
        batch: u64,
        lr_l: f64,
        lr_gamma: f64,
        passes: u32,
    },
    /// Independent SGD over an overcomplete partition with rate
    /// `1/(L + gamma sqrt(t))`, then one uniform average.
    Overcomplete {
        replication: u32,
        lr_l: f64,
        lr_gamma: f64,
    },
}

fn check_rate(lr_l: f64, lr_gamma: f64) -> Result<()> {
    if !(lr_l >= 0.0 && lr_l.is_finite() && lr_gamma >= 0.0 && lr_gamma.is_finite()) {
        return Err(Error::Config(format!(
            "learning-rate parameters must be finite and >= 0 (L={lr_l}, gamma={lr_gamma})"
        )));
    }
    if lr_l == 0.0 && lr_gamma == 0.0 {
        return Err(Error::Config("L and gamma cannot both be zero".into()));
    }
    Ok(())
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Hybrid { .. } => "hybrid",
            Strategy::OnlineRepeated { .. } => "online",
            Strategy::Batch => "batch",
            Strategy::Minibatch { .. } => "minibatch",
            Strategy::Overcomplete { .. } => "overcomplete",
        }
    }

    pub fn validate(&self, nodes: u32) -> Result<()> {
        match *self {
            Strategy::Hybrid { online_passes } => {
                if online_passes == 0 {
                    return Err(Error::Config(
                        "hybrid requires at least one online pass; use --strategy batch \
                         for a cold start"
                            .into(),
                    ));
                }
            }
            Strategy::OnlineRepeated { passes } => {
                if passes == 0 {
                    return Err(Error::Config("online strategy needs passes >= 1".into()));
                }
            }
            Strategy::Batch => {}
            Strategy::Minibatch {
                batch,
                lr_l,
                lr_gamma,
                passes,
            } => {
                check_rate(lr_l, lr_gamma)?;
                if passes == 0 {
                    return Err(Error::Config("minibatch needs passes >= 1".into()));
                }
                if batch != 0 {
                    if batch < u64::from(nodes) {
                        return Err(Error::Config(format!(
                            "global batch {batch} smaller than node count {nodes}"
                        )));
                    }
                    if batch % u64::from(nodes) != 0 {
                        return Err(Error::Config(format!(
                            "global batch {batch} must be divisible by node count {nodes}"
                        )));
                    }
                }
            }
            Strategy::Overcomplete {
                replication,
                lr_l,
                lr_gamma,
            } => {
                check_rate(lr_l, lr_gamma)?;
                if replication == 0 || replication > nodes {
                    return Err(Error::Config(format!(
                        "replication must be in 1..={nodes}, got {replication}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Does the strategy run local work before the tree forms?
    pub fn has_warmstart(&self) -> bool {
        matches!(
            self,
            Strategy::Hybrid { .. } | Strategy::OnlineRepeated { .. } | Strategy::Overcomplete { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct DriverConfig {
    pub objective: Objective,
    pub bits: u32,
    pub strategy: Strategy,
    pub online: OnlineConfig,
    pub lbfgs: LbfgsParams,
    /// Keep per-step weight snapshots so rank 0 can evaluate test metrics
    /// for every pass once training is done.
    pub snapshot: bool,
}

/// One line of the run report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub rank: u32,
    pub phase: &'static str,
    pub step: u64,
    /// Scaled global objective, when the phase computed one.
    pub objective: Option<f64>,
    pub grad_norm: Option<f64>,
    pub seconds: f64,
    pub collective_seconds: f64,
    pub compute_seconds: f64,
    pub test_auprc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub final_stats: CollectiveStats,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunReport {
    pub const CSV_HEADER: &'static str =
        "rank,phase,step,objective,grad_norm,seconds,collective_seconds,compute_seconds,test_auprc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.rank,
                r.phase,
                r.step,
                fmt_opt(r.objective),
                fmt_opt(r.grad_norm),
                r.seconds,
                r.collective_seconds,
                r.compute_seconds,
                fmt_opt(r.test_auprc),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// A weight vector captured after a named step, for post-run evaluation.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub phase: &'static str,
    pub step: u64,
    pub weights: Vec<f64>,
}

pub struct RunOutcome {
    pub model: ModelState,
    pub report: RunReport,
    pub lbfgs_trace: Vec<TraceRow>,
    pub snapshots: Vec<Snapshot>,
}

/// Everything a worker does before it knows its rank.
pub struct LocalPhase {
    pub model: ModelState,
    rows: Vec<ReportRow>,
    snapshots: Vec<Snapshot>,
    pub pass_done: bool,
    sgd_updates: u64,
}

const RANK_UNKNOWN: u32 = u32::MAX;

fn plain_row(phase: &'static str, step: u64, started: Instant) -> ReportRow {
    let seconds = started.elapsed().as_secs_f64();
    ReportRow {
        rank: RANK_UNKNOWN,
        phase,
        step,
        objective: None,
        grad_norm: None,
        seconds,
        collective_seconds: 0.0,
        compute_seconds: seconds,
        test_auprc: None,
    }
}

/// Load-time work plus, for warmstarted strategies, the first local pass.
pub fn initial_local_phase(shard: &Shard, cfg: &DriverConfig) -> Result<LocalPhase> {
    cfg.online.validate()?;
    cfg.lbfgs.validate()?;
    let dim = cfg.objective.dim;
    let mut phase = LocalPhase {
        model: ModelState::new(dim),
        rows: Vec::new(),
        snapshots: Vec::new(),
        pass_done: false,
        sgd_updates: 0,
    };
    match cfg.strategy {
        Strategy::Hybrid { .. } | Strategy::OnlineRepeated { .. } => {
            let t0 = Instant::now();
            sgd_pass(shard, &mut phase.model, &cfg.online, &cfg.objective)
                .map_err(Error::in_phase("online"))?;
            phase.rows.push(plain_row("online", 1, t0));
            if cfg.snapshot {
                phase.snapshots.push(Snapshot {
                    phase: "online",
                    step: 1,
                    weights: phase.model.weights.clone(),
                });
            }
            phase.pass_done = true;
        }
        Strategy::Overcomplete { lr_l, lr_gamma, .. } => {
            let t0 = Instant::now();
            phase.sgd_updates = plain_sgd_pass(
                shard,
                &mut phase.model.weights,
                &cfg.objective,
                lr_l,
                lr_gamma,
                0,
            )
            .map_err(Error::in_phase("sgd"))?;
            phase.model.passes = 1;
            phase.model.phase = Phase::Online;
            phase.rows.push(plain_row("sgd", 1, t0));
            phase.pass_done = true;
        }
        Strategy::Batch | Strategy::Minibatch { .. } => {}
    }
    Ok(phase)
}

struct PhaseClock {
    started: Instant,
    coll_before: f64,
}

impl PhaseClock {
    fn start<C: Collective>(coll: &C) -> Self {
        PhaseClock {
            started: Instant::now(),
            coll_before: coll.stats().seconds,
        }
    }

    fn row<C: Collective>(&self, coll: &C, phase: &'static str, step: u64) -> ReportRow {
        let seconds = self.started.elapsed().as_secs_f64();
        let collective_seconds = coll.stats().seconds - self.coll_before;
        ReportRow {
            rank: coll.rank(),
            phase,
            step,
            objective: None,
            grad_norm: None,
            seconds,
            collective_seconds,
            compute_seconds: (seconds - collective_seconds).max(0.0),
            test_auprc: None,
        }
    }
}

/// Global scaled objective at `w`: one scalar collective plus the locally
/// replicated regularizer. `reg_weight` is 1 for plain partitions and the
/// replication factor for overcomplete ones (where the loss sum counts
/// every example `r` times).
fn global_scaled_objective<C: Collective>(
    w: &[f64],
    shard: &Shard,
    objective: &Objective,
    coll: &mut C,
    n_global: f64,
    reg_weight: f64,
) -> Result<f64> {
    let f_local = objective.batch_objective(w, shard)?;
    let f_sum = coll.allreduce_scalar(f_local, ReduceOp::Sum)?;
    Ok((f_sum + reg_weight * objective.regularizer(w)) / n_global.max(1.0))
}

/// The post-handshake half of a strategy run.
pub fn run_after_join<C: Collective>(
    shard: &Shard,
    cfg: &DriverConfig,
    local: LocalPhase,
    coll: &mut C,
) -> Result<RunOutcome> {
    cfg.strategy.validate(coll.nodes())?;
    let rank = coll.rank();
    let nodes = coll.nodes();
    let LocalPhase {
        mut model,
        mut rows,
        mut snapshots,
        sgd_updates,
        ..
    } = local;
    for r in rows.iter_mut() {
        r.rank = rank;
    }

    // Global example count (for objective scaling and auto batch sizes).
    let n_global = coll.allreduce_scalar(shard.len() as f64, ReduceOp::Sum)?;
    let mut lbfgs_trace: Vec<TraceRow> = Vec::new();

    let mut run_lbfgs = |model: &mut ModelState,
                         rows: &mut Vec<ReportRow>,
                         snapshots: &mut Vec<Snapshot>,
                         coll: &mut C|
     -> Result<Vec<TraceRow>> {
        let clock = PhaseClock::start(coll);
        let snap = cfg.snapshot;
        let mut snaps: Vec<Snapshot> = Vec::new();
        let out = lbfgs_optimize(
            model.weights.clone(),
            shard,
            &cfg.objective,
            &cfg.lbfgs,
            n_global,
            coll,
            |iter, state| {
                if snap {
                    snaps.push(Snapshot {
                        phase: "lbfgs",
                        step: u64::from(iter),
                        weights: state.weights.clone(),
                    });
                }
            },
        )
        .map_err(Error::in_phase("lbfgs"))?;
        info!(
            "rank {rank}: lbfgs finished after {} iterations ({:?})",
            out.state.iterations, out.status
        );
        // Per-iteration rows carry deltas of the cumulative trace columns.
        for (i, tr) in out.trace.iter().enumerate() {
            let (sec_prev, coll_prev) = if i == 0 {
                (0.0, clock.coll_before)
            } else {
                (out.trace[i - 1].seconds, out.coll_seconds[i - 1])
            };
            let seconds = tr.seconds - sec_prev;
            let collective_seconds = out.coll_seconds[i] - coll_prev;
            rows.push(ReportRow {
                rank,
                phase: "lbfgs",
                step: u64::from(tr.iter),
                objective: Some(tr.objective),
                grad_norm: Some(tr.grad_norm),
                seconds,
                collective_seconds,
                compute_seconds: (seconds - collective_seconds).max(0.0),
                test_auprc: None,
            });
        }
        snapshots.extend(snaps);
        model.weights = out.state.weights.clone();
        model.phase = Phase::Batch;
        Ok(out.trace)
    };

    match cfg.strategy {
        Strategy::Hybrid { online_passes } => {
            for pass in 2..=u64::from(online_passes) {
                let t0 = Instant::now();
                sgd_pass(shard, &mut model, &cfg.online, &cfg.objective)
                    .map_err(Error::in_phase("online"))?;
                let mut r = plain_row("online", pass, t0);
                r.rank = rank;
                rows.push(r);
                if cfg.snapshot {
                    snapshots.push(Snapshot {
                        phase: "online",
                        step: pass,
                        weights: model.weights.clone(),
                    });
                }
            }
            let clock = PhaseClock::start(coll);
            let wbar = weighted_average_w(&model.weights, &model.scaling, coll)
                .map_err(Error::in_phase("average"))?;
            let gbar = weighted_average_g(&model.scaling, coll)
                .map_err(Error::in_phase("average"))?;
            model.weights = wbar;
            model.scaling = gbar;
            model.phase = Phase::Averaged;
            let f = global_scaled_objective(&model.weights, shard, &cfg.objective, coll, n_global, 1.0)
                .map_err(Error::in_phase("average"))?;
            let mut r = clock.row(coll, "average", 1);
            r.objective = Some(f);
            rows.push(r);
            if cfg.snapshot {
                snapshots.push(Snapshot {
                    phase: "average",
                    step: 1,
                    weights: model.weights.clone(),
                });
            }
            lbfgs_trace = run_lbfgs(&mut model, &mut rows, &mut snapshots, coll)?;
        }
        Strategy::OnlineRepeated { passes } => {
            for pass in 1..=u64::from(passes) {
                if pass >= 2 {
                    let t0 = Instant::now();
                    sgd_pass(shard, &mut model, &cfg.online, &cfg.objective)
                        .map_err(Error::in_phase("online"))?;
                    let mut r = plain_row("online", pass, t0);
                    r.rank = rank;
                    rows.push(r);
                }
                let clock = PhaseClock::start(coll);
                let wbar = weighted_average_w(&model.weights, &model.scaling, coll)
                    .map_err(Error::in_phase("average"))?;
                let gbar = weighted_average_g(&model.scaling, coll)
                    .map_err(Error::in_phase("average"))?;
                model.weights = wbar;
                model.scaling = gbar;
                model.phase = Phase::Averaged;
                let f =
                    global_scaled_objective(&model.weights, shard, &cfg.objective, coll, n_global, 1.0)
                        .map_err(Error::in_phase("average"))?;
                let mut r = clock.row(coll, "average", pass);
                r.objective = Some(f);
                rows.push(r);
                if cfg.snapshot {
                    snapshots.push(Snapshot {
                        phase: "average",
                        step: pass,
                        weights: model.weights.clone(),
                    });
                }
            }
        }
        Strategy::Batch => {
            lbfgs_trace = run_lbfgs(&mut model, &mut rows, &mut snapshots, coll)?;
        }
        Strategy::Minibatch {
            batch,
            lr_l,
            lr_gamma,
            passes,
        } => {
            let m = u64::from(nodes);
            let batch = if batch == 0 {
                // b ~ sqrt(n), rounded up to a multiple of m.
                let b = (n_global.sqrt().round() as u64).max(m);
                b.div_ceil(m) * m
            } else {
                batch
            };
            let per_node = (batch / m) as usize;
            // Lockstep round count: every node must run the same number of
            // collectives even when shard sizes differ.
            let my_rounds = shard.len().div_ceil(per_node) as f64;
            let rounds = coll.allreduce_scalar(my_rounds, ReduceOp::Max)? as u64;
            info!(
                "rank {rank}: minibatch b={batch} ({per_node}/node), {rounds} updates/pass"
            );
            let mut t = 0u64;
            for pass in 1..=u64::from(passes) {
                let clock = PhaseClock::start(coll);
                for round in 0..rounds {
                    t += 1;
                    let lo = (round as usize) * per_node;
                    let (f_loc, mut grad, count) = cfg
                        .objective
                        .gradient_over(&model.weights, shard.iter_slice(lo..lo + per_node))
                        .map_err(Error::in_phase("minibatch"))?;
                    let _ = f_loc;
                    grad.push(count as f64);
                    coll.allreduce(&mut grad, ReduceOp::Sum)
                        .map_err(Error::in_phase("minibatch"))?;
                    let total = grad.pop().expect("count element");
                    if total == 0.0 {
                        continue;
                    }
                    let eta = 1.0 / (lr_l + lr_gamma * (t as f64 / m as f64).sqrt());
                    let scale = eta / total;
                    for (w, g) in model.weights.iter_mut().zip(&grad) {
                        *w -= scale * g;
                    }
                }
                model.passes += 1;
                let f =
                    global_scaled_objective(&model.weights, shard, &cfg.objective, coll, n_global, 1.0)
                        .map_err(Error::in_phase("minibatch"))?;
                let mut r = clock.row(coll, "minibatch", pass);
                r.objective = Some(f);
                rows.push(r);
                if cfg.snapshot {
                    snapshots.push(Snapshot {
                        phase: "minibatch",
                        step: pass,
                        weights: model.weights.clone(),
                    });
                }
            }
        }
        Strategy::Overcomplete { replication, .. } => {
            let _ = sgd_updates;
            let clock = PhaseClock::start(coll);
            coll.allreduce(&mut model.weights, ReduceOp::Sum)
                .map_err(Error::in_phase("average"))?;
            let inv_m = 1.0 / f64::from(nodes);
            for w in model.weights.iter_mut() {
                *w *= inv_m;
            }
            model.phase = Phase::Averaged;
            let f = global_scaled_objective(
                &model.weights,
                shard,
                &cfg.objective,
                coll,
                n_global,
                f64::from(replication),
            )
            .map_err(Error::in_phase("average"))?;
            let mut r = clock.row(coll, "average", 1);
            r.objective = Some(f);
            rows.push(r);
            if cfg.snapshot {
                snapshots.push(Snapshot {
                    phase: "average",
                    step: 1,
                    weights: model.weights.clone(),
                });
            }
        }
    }

    Ok(RunOutcome {
        model,
        report: RunReport {
            rows,
            final_stats: coll.stats(),
        },
        lbfgs_trace,
        snapshots,
    })
}

/// Run a whole strategy over an established collective (no speculation
/// gate). With a solo collective this is the single-node semantics every
/// distributed run is compared against.
pub fn run_strategy<C: Collective>(
    shard: &Shard,
    cfg: &DriverConfig,
    coll: &mut C,
) -> Result<RunOutcome> {
    cfg.strategy.validate(coll.nodes())?;
    let local = initial_local_phase(shard, cfg)?;
    run_after_join(shard, cfg, local, coll)
}

/// CLI-facing worker configuration.
#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub coordinator: String,
    pub job_id: String,
    pub nodes: u32,
    pub data: PathBuf,
    pub bits: u32,
    pub loss: LossKind,
    pub lambda: f64,
    pub strategy: Strategy,
    pub online: OnlineConfig,
    pub lbfgs: LbfgsParams,
    pub model_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub lbfgs_trace_out: Option<PathBuf>,
    pub chunk_bytes: usize,
    pub bind: String,
    pub slow_factor: f64,
    /// Harness gate endpoint; when set the worker reports first-pass
    /// completion and proceeds only if it wins its shard.
    pub gate: Option<String>,
    pub shard_id: u32,
    pub duplicate: u32,
    pub handshake_timeout: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerExit {
    Completed,
    /// A sibling duplicate finished the first pass earlier; this worker
    /// never joined the tree.
    SpeculationLoser,
}

fn gate_check(addr: &str, shard_id: u32, duplicate: u32) -> Result<bool> {
    let mut stream = TcpStream::connect(addr)
        .map_err(|e| Error::Comm(format!("connect gate {addr}: {e}")))?;
    stream
        .set_read_timeout(Some(Duration::from_secs(600)))
        .map_err(|e| Error::Comm(format!("gate socket: {e}")))?;
    writeln!(stream, "done {shard_id} {duplicate} {}", std::process::id())
        .map_err(|e| Error::Comm(format!("gate write: {e}")))?;
    let mut line = String::new();
    BufReader::new(stream)
        .read_line(&mut line)
        .map_err(|e| Error::Comm(format!("gate read: {e}")))?;
    match line.trim() {
        "win" => Ok(true),
        "lose" => Ok(false),
        other => Err(Error::Protocol(format!("gate said {other:?}"))),
    }
}

/// Evaluate the snapshots against a test file on rank 0 and fill the
/// matching report rows' `test_auprc`.
fn attach_test_metrics(
    report: &mut RunReport,
    snapshots: &[Snapshot],
    objective: &Objective,
    test_path: &std::path::Path,
    bits: u32,
) -> Result<()> {
    let test = load_examples(test_path, bits)?;
    if test.is_empty() {
        return Err(Error::Argument(format!(
            "test file {} holds no examples",
            test_path.display()
        )));
    }
    for snap in snapshots {
        let mut scored = Vec::with_capacity(test.len());
        for x in &test {
            let p = objective.predict(&snap.weights, x)?;
            scored.push(Scored {
                score: p.probability,
                label: x.label > 0.5,
            });
        }
        let metric = auprc(&scored)?;
        for row in report.rows.iter_mut() {
            if row.phase == snap.phase && row.step == snap.step {
                row.test_auprc = Some(metric);
            }
        }
    }
    Ok(())
}

/// Full worker lifecycle: load, warmstart, gate, join, train, write
/// artifacts. Rank 0 owns the model file and test evaluation.
pub fn run_worker(cfg: &WorkerConfig) -> Result<WorkerExit> {
    cfg.strategy.validate(cfg.nodes)?;
    crate::data::check_bits(cfg.bits).map_err(|e| Error::Config(e.to_string()))?;
    let objective = Objective::new(cfg.loss, cfg.lambda, 1usize << cfg.bits)
        .map_err(|e| Error::Config(e.to_string()))?;
    let driver = DriverConfig {
        objective,
        bits: cfg.bits,
        strategy: cfg.strategy,
        online: cfg.online,
        lbfgs: cfg.lbfgs,
        snapshot: cfg.test_data.is_some(),
    };

    let shard = Shard::load(&cfg.data, cfg.bits, cfg.slow_factor)?;
    info!(
        "worker: {} examples from {}, strategy {}",
        shard.len(),
        cfg.data.display(),
        cfg.strategy.name()
    );
    let local = initial_local_phase(&shard, &driver)?;

    if let Some(gate) = &cfg.gate {
        if !gate_check(gate, cfg.shard_id, cfg.duplicate)? {
            info!("worker: lost the speculation race for shard {}", cfg.shard_id);
            return Ok(WorkerExit::SpeculationLoser);
        }
    }

    let mut join_cfg = JoinConfig::new(cfg.coordinator.clone(), cfg.job_id.clone(), cfg.nodes);
    join_cfg.bind = cfg.bind.clone();
    join_cfg.pass_done = local.pass_done;
    join_cfg.chunk_bytes = cfg.chunk_bytes;
    join_cfg.timeout = cfg.handshake_timeout;
    let mut coll = join_tree(&join_cfg)?;
    let rank = coll.rank();
    info!("worker: joined as rank {rank}/{}", cfg.nodes);

    let outcome = run_after_join(&shard, &driver, local, &mut coll)?;
    let mut report = outcome.report;

    if rank == 0 {
        if let Some(path) = &cfg.model_out {
            save_model(
                path,
                cfg.bits,
                cfg.loss,
                cfg.lambda,
                &outcome.model.weights,
            )?;
            info!("worker: model written to {}", path.display());
        }
        if let Some(test) = &cfg.test_data {
            attach_test_metrics(
                &mut report,
                &outcome.snapshots,
                &driver.objective,
                test,
                cfg.bits,
            )?;
        }
    }
    if let Some(path) = &cfg.report_out {
        report.write_csv(path)?;
    }
    if let Some(path) = &cfg.lbfgs_trace_out {
        if !outcome.lbfgs_trace.is_empty() {
            write_trace_csv(path, &outcome.lbfgs_trace)?;
        }
    }
    Ok(WorkerExit::Completed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::local::run_local_nodes;
    use crate::comm::{TcpCollective, DEFAULT_CHUNK_BYTES};
    use crate::data::SparseExample;
    use crate::online::Invariance;

    fn driver(strategy: Strategy, bits: u32, lambda: f64) -> DriverConfig {
        DriverConfig {
            objective: Objective::new(LossKind::Logistic, lambda, 1 << bits).unwrap(),
            bits,
            strategy,
            online: OnlineConfig::default(),
            lbfgs: LbfgsParams {
                max_iters: 10,
                ..LbfgsParams::default()
            },
            snapshot: false,
        }
    }

    fn tiny_examples(n: usize, bits: u32, seed: u64) -> Vec<SparseExample> {
        let lines = crate::synth::generate_lines(&crate::synth::SynthConfig {
            examples: n,
            bits,
            vocab: 1 << bits,
            nnz: 5,
            margin_scale: 2.0,
            seed,
        })
        .unwrap();
        lines
            .iter()
            .map(|l| SparseExample::parse(l, bits).unwrap())
            .collect()
    }

    #[test]
    fn hybrid_on_one_node_equals_sgd_then_lbfgs() {
        let bits = 6;
        let examples = tiny_examples(300, bits, 3);
        let cfg = driver(Strategy::Hybrid { online_passes: 1 }, bits, 1e-3);

        let shard = Shard::from_examples(examples.clone());
        let mut coll = TcpCollective::solo();
        let out = run_strategy(&shard, &cfg, &mut coll).unwrap();

        // Manual: one online pass, then L-BFGS from those weights
        // (averaging over one node is the identity).
        let mut model = ModelState::new(cfg.objective.dim);
        sgd_pass(&shard, &mut model, &cfg.online, &cfg.objective).unwrap();
        let mut solo = TcpCollective::solo();
        let manual = lbfgs_optimize(
            model.weights.clone(),
            &shard,
            &cfg.objective,
            &cfg.lbfgs,
            300.0,
            &mut solo,
            |_, _| {},
        )
        .unwrap();
        assert_eq!(out.model.weights.len(), manual.state.weights.len());
        for (a, b) in out.model.weights.iter().zip(&manual.state.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hybrid_rejects_zero_online_passes() {
        let err = Strategy::Hybrid { online_passes: 0 }.validate(4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn minibatch_validation() {
        let mk = |batch| Strategy::Minibatch {
            batch,
            lr_l: 1.0,
            lr_gamma: 1.0,
            passes: 1,
        };
        assert!(mk(0).validate(4).is_ok()); // auto
        assert!(mk(8).validate(4).is_ok());
        assert!(mk(2).validate(4).is_err()); // < m
        assert!(mk(9).validate(4).is_err()); // not divisible
        assert!(Strategy::Overcomplete {
            replication: 5,
            lr_l: 1.0,
            lr_gamma: 1.0
        }
        .validate(4)
        .is_err());
    }

    #[test]
    fn online_repeated_on_identical_shards_is_symmetric() {
        let bits = 6;
        let examples = tiny_examples(100, bits, 11);
        let cfg = driver(Strategy::OnlineRepeated { passes: 2 }, bits, 0.0);
        // Both nodes hold the same shard, so averaging returns each node's
        // own weights and every node matches the single-node run.
        let results = run_local_nodes(2, DEFAULT_CHUNK_BYTES, |_, coll| {
            let shard = Shard::from_examples(examples.clone());
            run_strategy(&shard, &cfg, coll).map(|o| o.model.weights)
        })
        .unwrap();

        let shard = Shard::from_examples(examples.clone());
        let mut model = ModelState::new(cfg.objective.dim);
        sgd_pass(&shard, &mut model, &cfg.online, &cfg.objective).unwrap();
        sgd_pass(&shard, &mut model, &cfg.online, &cfg.objective).unwrap();

        for w in &results {
            for (a, b) in w.iter().zip(&model.weights) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn minibatch_full_batch_is_one_deterministic_gradient_step() {
        // b = n, squared loss, one pass: exactly one mean-gradient step
        // with eta_1 = 1/(L + gamma*sqrt(1/m)).
        let bits = 4;
        let dim = 1 << bits;
        let examples: Vec<SparseExample> = (0..8)
            .map(|k| SparseExample {
                label: (k % 3) as f64,
                importance: 1.0,
                features: vec![((k % dim) as u32, 1.0 + 0.1 * k as f64)],
            })
            .collect();
        let obj = Objective::new(LossKind::Squared, 0.0, dim as usize).unwrap();
        let cfg = DriverConfig {
            objective: obj,
            bits,
            strategy: Strategy::Minibatch {
                batch: 8,
                lr_l: 1.0,
                lr_gamma: 2.0,
                passes: 1,
            },
            online: OnlineConfig::default(),
            lbfgs: LbfgsParams::default(),
            snapshot: false,
        };
        let shard = Shard::from_examples(examples.clone());
        let mut coll = TcpCollective::solo();
        let out = run_strategy(&shard, &cfg, &mut coll).unwrap();

        let (_, grad, count) = obj.gradient_over(&vec![0.0; dim as usize], examples.iter()).unwrap();
        let eta = 1.0 / (1.0 + 2.0 * 1.0f64.sqrt());
        let want: Vec<f64> = grad.iter().map(|g| 0.0 - eta / count as f64 * g).collect();
        for (a, b) in out.model.weights.iter().zip(&want) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn overcomplete_uses_exactly_one_vector_collective() {
        let bits = 5;
        let examples = tiny_examples(60, bits, 5);
        let cfg = DriverConfig {
            objective: Objective::new(LossKind::Logistic, 0.0, 1 << bits).unwrap(),
            bits,
            strategy: Strategy::Overcomplete {
                replication: 1,
                lr_l: 1.0,
                lr_gamma: 1.0,
            },
            online: OnlineConfig::default(),
            lbfgs: LbfgsParams::default(),
            snapshot: false,
        };
        let stats = run_local_nodes(3, DEFAULT_CHUNK_BYTES, |rank, coll| {
            let mine: Vec<SparseExample> = examples
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 3 == rank as usize)
                .map(|(_, x)| x.clone())
                .collect();
            let shard = Shard::from_examples(mine);
            let out = run_strategy(&shard, &cfg, coll)?;
            Ok(out.report.final_stats)
        })
        .unwrap();
        for s in stats {
            assert_eq!(s.vector_calls, 1);
            assert_eq!(s.scalar_calls, 2); // n_global + report objective
        }
    }

    #[test]
    fn overcomplete_replication_one_on_one_node_is_plain_sgd() {
        let bits = 5;
        let examples = tiny_examples(80, bits, 9);
        let cfg = DriverConfig {
            objective: Objective::new(LossKind::Logistic, 0.0, 1 << bits).unwrap(),
            bits,
            strategy: Strategy::Overcomplete {
                replication: 1,
                lr_l: 0.5,
                lr_gamma: 1.5,
            },
            online: OnlineConfig::default(),
            lbfgs: LbfgsParams::default(),
            snapshot: false,
        };
        let shard = Shard::from_examples(examples.clone());
        let mut coll = TcpCollective::solo();
        let out = run_strategy(&shard, &cfg, &mut coll).unwrap();

        let mut w = vec![0.0; 1 << bits];
        let shard2 = Shard::from_examples(examples);
        plain_sgd_pass(&shard2, &mut w, &cfg.objective, 0.5, 1.5, 0).unwrap();
        for (a, b) in out.model.weights.iter().zip(&w) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hybrid_collective_budget_is_exact() {
        // 2 averaging collectives for w, 2 for G, 1 preconditioner, and
        // (iterations + 1) gradient vectors; scalars are the setup count,
        // the averaging report objective, and one per line-search trial.
        let bits = 6;
        let examples = tiny_examples(200, bits, 21);
        let cfg = driver(Strategy::Hybrid { online_passes: 1 }, bits, 1e-3);
        let results = run_local_nodes(4, DEFAULT_CHUNK_BYTES, |rank, coll| {
            let mine: Vec<SparseExample> = examples
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 4 == rank as usize)
                .map(|(_, x)| x.clone())
                .collect();
            let shard = Shard::from_examples(mine);
            let out = run_strategy(&shard, &cfg, coll)?;
            let iters = out.lbfgs_trace.len() as u64 - 1;
            let trials: u64 = out
                .report
                .rows
                .iter()
                .filter(|r| r.phase == "lbfgs" && r.step > 0)
                .count() as u64; // placeholder; real trial count from stats
            let _ = trials;
            Ok((out.report.final_stats, iters))
        })
        .unwrap();
        for (stats, iters) in results {
            assert_eq!(stats.vector_calls, 2 + 2 + 1 + (iters + 1));
            // scalar calls: setup n + average objective + line-search trials
            assert!(stats.scalar_calls >= 2 + iters, "{stats:?}");
        }
    }

    #[test]
    fn report_csv_is_parseable() {
        let bits = 5;
        let examples = tiny_examples(50, bits, 2);
        let cfg = driver(Strategy::Hybrid { online_passes: 1 }, bits, 1e-3);
        let shard = Shard::from_examples(examples);
        let mut coll = TcpCollective::solo();
        let out = run_strategy(&shard, &cfg, &mut coll).unwrap();
        let csv = out.report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(RunReport::CSV_HEADER));
        let mut phases = Vec::new();
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 9);
            phases.push(cols[1].to_string());
        }
        assert!(phases.contains(&"online".to_string()));
        assert!(phases.contains(&"average".to_string()));
        assert!(phases.contains(&"lbfgs".to_string()));
    }
}
