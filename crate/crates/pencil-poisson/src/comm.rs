//! In-process message passing for SPMD solver programs.
//!
//! `run_spmd` launches N worker threads that share one transport; each worker
//! drives its own [`Communicator`]. The public surface is the contract solver
//! code is written against, so a network transport could replace the thread
//! transport without touching callers:
//!
//! * point-to-point byte messages, FIFO per `(sender, receiver, tag)`;
//! * grouped [`Communicator::exchange`], also splittable into
//!   `exchange_start` / `exchange_finish` so computation can overlap it;
//! * [`Communicator::allreduce_sum`] over `f64` vectors, always accumulated
//!   in rank-ascending order so every rank sees bitwise-identical sums;
//! * [`Communicator::barrier`] with strict step lockstep.
//!
//! Sends are eager (the payload is copied into the shared mailbox), so a send
//! buffer may be reused as soon as the call returns and grouped exchanges
//! cannot deadlock on ordering. Receives block, with a timeout that turns a
//! deadlocked program into an error instead of a hang. A pending split
//! exchange holds `&mut` borrows of its receive buffers, so reusing them
//! before `exchange_finish` is rejected at compile time; dropping a pending
//! exchange without finishing it trips a debug assertion.

use crate::{Error, Result};
use std::cell::Cell;
use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

/// Harness-wide settings. The timeout bounds every blocking wait.
#[derive(Debug, Clone, Copy)]
pub struct SpmdConfig {
    pub timeout: Duration,
}

impl Default for SpmdConfig {
    fn default() -> Self {
        SpmdConfig { timeout: Duration::from_secs(30) }
    }
}

/// Per-worker communication totals, readable at any point in a program.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommCounters {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub reductions: u64,
    pub barriers: u64,
}

/// One outgoing message in a grouped exchange. Payload bytes are copied out
/// eagerly, so the referenced buffer is free for reuse once the call returns.
#[derive(Debug, Clone, Copy)]
pub struct SendMessage<'a> {
    pub peer: usize,
    pub tag: u32,
    pub bytes: &'a [u8],
}

/// One expected incoming message; `buf.len()` is the expected payload size.
#[derive(Debug)]
pub struct RecvMessage<'a> {
    pub peer: usize,
    pub tag: u32,
    pub buf: &'a mut [u8],
}

/// A split exchange whose receives have not completed yet. Owns the receive
/// buffers until [`Communicator::exchange_finish`] consumes it.
#[derive(Debug)]
pub struct PendingExchange<'a> {
    recvs: Vec<RecvMessage<'a>>,
    finished: bool,
}

impl Drop for PendingExchange<'_> {
    fn drop(&mut self) {
        debug_assert!(
            self.finished || std::thread::panicking(),
            "pending exchange dropped without exchange_finish"
        );
    }
}

type MailKey = (usize, usize, u32); // (sender, receiver, tag)

#[derive(Default)]
struct MailboxState {
    queues: HashMap<MailKey, VecDeque<Vec<u8>>>,
}

struct Mailbox {
    state: Mutex<MailboxState>,
    delivered: Condvar,
}

struct BarrierState {
    waiting: usize,
    generation: u64,
    /// Completed barrier calls per rank; equal across ranks at every
    /// generation boundary because barriers block.
    calls: Vec<u64>,
}

struct Barrier {
    state: Mutex<BarrierState>,
    released: Condvar,
}

struct ReduceState {
    slots: Vec<Option<Vec<f64>>>,
    deposited: usize,
    taken: usize,
    collecting: bool,
    result: Vec<f64>,
    error: Option<Error>,
}

struct Reduce {
    state: Mutex<ReduceState>,
    phase: Condvar,
}

struct SharedTransport {
    size: usize,
    cfg: SpmdConfig,
    mailbox: Mailbox,
    barrier: Barrier,
    reduce: Reduce,
}

impl SharedTransport {
    fn new(size: usize, cfg: SpmdConfig) -> Self {
        SharedTransport {
            size,
            cfg,
            mailbox: Mailbox {
                state: Mutex::new(MailboxState::default()),
                delivered: Condvar::new(),
            },
            barrier: Barrier {
                state: Mutex::new(BarrierState {
                    waiting: 0,
                    generation: 0,
                    calls: vec![0; size],
                }),
                released: Condvar::new(),
            },
            reduce: Reduce {
                state: Mutex::new(ReduceState {
                    slots: vec![None; size],
                    deposited: 0,
                    taken: 0,
                    collecting: false,
                    result: Vec::new(),
                    error: None,
                }),
                phase: Condvar::new(),
            },
        }
    }
}

/// One worker's endpoint. Create only through [`run_spmd`].
pub struct Communicator {
    rank: usize,
    shared: Arc<SharedTransport>,
    counters: Cell<CommCounters>,
}

impl Communicator {
    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.shared.size
    }

    pub fn counters(&self) -> CommCounters {
        self.counters.get()
    }

    pub fn reset_counters(&self) {
        self.counters.set(CommCounters::default());
    }

    fn bump(&self, f: impl FnOnce(&mut CommCounters)) {
        let mut c = self.counters.get();
        f(&mut c);
        self.counters.set(c);
    }

    /// Eager buffered send; never blocks.
    pub(crate) fn send_bytes(&self, peer: usize, tag: u32, bytes: &[u8]) -> Result<()> {
        if peer >= self.size() {
            return Err(Error::InvalidArgument(format!(
                "send to rank {peer} outside world of {}",
                self.size()
            )));
        }
        {
            let mut st = self.shared.mailbox.state.lock().unwrap();
            st.queues
                .entry((self.rank, peer, tag))
                .or_default()
                .push_back(bytes.to_vec());
        }
        self.shared.mailbox.delivered.notify_all();
        self.bump(|c| {
            c.messages_sent += 1;
            c.bytes_sent += bytes.len() as u64;
        });
        Ok(())
    }

    /// Blocking receive into a caller buffer whose length is the expected
    /// payload size. FIFO per `(sender, receiver, tag)`.
    pub(crate) fn recv_bytes_into(&self, peer: usize, tag: u32, buf: &mut [u8]) -> Result<()> {
        let deadline = Instant::now() + self.shared.cfg.timeout;
        let mut st = self.shared.mailbox.state.lock().unwrap();
        loop {
            if let Some(queue) = st.queues.get_mut(&(peer, self.rank, tag)) {
                if let Some(msg) = queue.pop_front() {
                    if msg.len() != buf.len() {
                        return Err(Error::SizeMismatch {
                            rank: self.rank,
                            peer,
                            expected: buf.len(),
                            got: msg.len(),
                        });
                    }
                    buf.copy_from_slice(&msg);
                    return Ok(());
                }
            }
            let remaining = deadline
                .checked_duration_since(Instant::now())
                .ok_or(Error::Timeout { rank: self.rank, what: "receive" })?;
            let (guard, timed_out) = self
                .shared
                .mailbox
                .delivered
                .wait_timeout(st, remaining)
                .unwrap();
            st = guard;
            if timed_out.timed_out() {
                return Err(Error::Timeout { rank: self.rank, what: "receive" });
            }
        }
    }

    /// Grouped exchange: post every send, then drain every receive. Each
    /// send must be matched by a same-tag receive posted by its peer in the
    /// same collective step.
    pub fn exchange(&self, sends: &[SendMessage], recvs: &mut [RecvMessage]) -> Result<()> {
        for s in sends {
            self.send_bytes(s.peer, s.tag, s.bytes)?;
        }
        for r in recvs.iter_mut() {
            self.recv_bytes_into(r.peer, r.tag, r.buf)?;
        }
        Ok(())
    }

    /// First half of a split exchange: sends complete eagerly, receives are
    /// only registered. Returns without waiting.
    pub fn exchange_start<'a>(
        &self,
        sends: &[SendMessage],
        recvs: Vec<RecvMessage<'a>>,
    ) -> Result<PendingExchange<'a>> {
        for s in sends {
            self.send_bytes(s.peer, s.tag, s.bytes)?;
        }
        Ok(PendingExchange { recvs, finished: false })
    }

    /// Second half of a split exchange: blocks until every registered
    /// receive has been delivered into its buffer.
    pub fn exchange_finish(&self, mut pending: PendingExchange) -> Result<()> {
        pending.finished = true;
        for r in pending.recvs.iter_mut() {
            self.recv_bytes_into(r.peer, r.tag, r.buf)?;
        }
        Ok(())
    }

    /// Element-wise global sum. Every rank passes the same number of
    /// partials and receives a bitwise-identical result, accumulated in
    /// rank-ascending order regardless of arrival order.
    pub fn allreduce_sum(&self, partials: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; partials.len()];
        self.allreduce_sum_into(partials, &mut out)?;
        Ok(out)
    }

    /// As [`Self::allreduce_sum`] but writing into a caller buffer, so hot
    /// solver loops do not allocate.
    pub fn allreduce_sum_into(&self, partials: &[f64], out: &mut [f64]) -> Result<()> {
        assert_eq!(partials.len(), out.len(), "allreduce output length");
        self.bump(|c| c.reductions += 1);
        if self.size() == 1 {
            out.copy_from_slice(partials);
            return Ok(());
        }
        let deadline = Instant::now() + self.shared.cfg.timeout;
        let mut st = self.shared.reduce.state.lock().unwrap();
        // Wait out the collect phase of any previous reduction.
        while st.collecting {
            st = self.wait_phase(st, deadline, "allreduce")?;
        }
        st.slots[self.rank] = Some(partials.to_vec());
        st.deposited += 1;
        if st.deposited == self.shared.size {
            let len = st.slots[0].as_ref().map(|s| s.len());
            let mismatch = st
                .slots
                .iter()
                .any(|s| s.as_ref().map(|v| v.len()) != len);
            if mismatch {
                st.error = Some(Error::CollectiveMismatch(
                    "allreduce partials differ in length across ranks".into(),
                ));
                st.result.clear();
            } else {
                let len = len.unwrap();
                st.error = None;
                let mut result = std::mem::take(&mut st.result);
                result.clear();
                result.resize(len, 0.0);
                // Rank-ascending accumulation pins the rounding order.
                for rank in 0..self.shared.size {
                    let slot = st.slots[rank].as_ref().unwrap();
                    for (acc, &v) in result.iter_mut().zip(slot) {
                        *acc += v;
                    }
                }
                st.result = result;
            }
            st.collecting = true;
            self.shared.reduce.phase.notify_all();
        } else {
            while !st.collecting {
                st = self.wait_phase(st, deadline, "allreduce")?;
            }
        }
        let res = match &st.error {
            Some(e) => Err(e.clone()),
            None => {
                out.copy_from_slice(&st.result);
                Ok(())
            }
        };
        st.taken += 1;
        if st.taken == self.shared.size {
            st.deposited = 0;
            st.taken = 0;
            st.collecting = false;
            for slot in st.slots.iter_mut() {
                *slot = None;
            }
            self.shared.reduce.phase.notify_all();
        }
        res
    }

    fn wait_phase<'m>(
        &self,
        guard: std::sync::MutexGuard<'m, ReduceState>,
        deadline: Instant,
        what: &'static str,
    ) -> Result<std::sync::MutexGuard<'m, ReduceState>> {
        let remaining = deadline
            .checked_duration_since(Instant::now())
            .ok_or(Error::Timeout { rank: self.rank, what })?;
        let (guard, timed_out) = self
            .shared
            .reduce
            .phase
            .wait_timeout(guard, remaining)
            .unwrap();
        if timed_out.timed_out() {
            return Err(Error::Timeout { rank: self.rank, what });
        }
        Ok(guard)
    }

    /// Block until every rank arrives. Barriers are lockstep: the n-th call
    /// on any rank joins the n-th global generation.
    pub fn barrier(&self) -> Result<()> {
        self.bump(|c| c.barriers += 1);
        if self.size() == 1 {
            return Ok(());
        }
        let deadline = Instant::now() + self.shared.cfg.timeout;
        let mut st = self.shared.barrier.state.lock().unwrap();
        st.calls[self.rank] += 1;
        st.waiting += 1;
        if st.waiting == self.shared.size {
            let step = st.calls[self.rank];
            debug_assert!(
                st.calls.iter().all(|&c| c == step),
                "barrier generations interleaved: {:?}",
                st.calls
            );
            st.waiting = 0;
            st.generation += 1;
            self.shared.barrier.released.notify_all();
            return Ok(());
        }
        let generation = st.generation;
        while st.generation == generation {
            let remaining = deadline
                .checked_duration_since(Instant::now())
                .ok_or(Error::Timeout { rank: self.rank, what: "barrier" })?;
            let (guard, timed_out) = self
                .shared
                .barrier
                .released
                .wait_timeout(st, remaining)
                .unwrap();
            st = guard;
            if timed_out.timed_out() {
                return Err(Error::Timeout { rank: self.rank, what: "barrier" });
            }
        }
        Ok(())
    }
}

/// Run `program` on `nworkers` threads sharing one transport, returning each
/// worker's result in rank order. A worker panic is converted into
/// [`Error::WorkerPanicked`] and takes precedence over secondary errors
/// (peers of a dead worker usually report timeouts).
pub fn run_spmd<T, F>(nworkers: usize, program: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Communicator) -> Result<T> + Send + Sync,
{
    run_spmd_cfg(nworkers, SpmdConfig::default(), program)
}

/// [`run_spmd`] with explicit harness settings (shorter timeouts in tests).
pub fn run_spmd_cfg<T, F>(nworkers: usize, cfg: SpmdConfig, program: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Communicator) -> Result<T> + Send + Sync,
{
    if nworkers == 0 {
        return Err(Error::InvalidArgument("need at least one worker".into()));
    }
    let shared = Arc::new(SharedTransport::new(nworkers, cfg));
    // Preallocated so the harness touches the allocator only before spawning
    // and after joining, never concurrently with worker code.
    let mut results: Vec<std::thread::Result<Result<T>>> = Vec::with_capacity(nworkers);
    std::thread::scope(|scope| {
        let program = &program;
        let handles: Vec<_> = (0..nworkers)
            .map(|rank| {
                let shared = Arc::clone(&shared);
                scope.spawn(move || {
                    let comm = Communicator {
                        rank,
                        shared,
                        counters: Cell::new(CommCounters::default()),
                    };
                    program(comm)
                })
            })
            .collect();
        results.extend(handles.into_iter().map(|h| h.join()));
    });

    let mut collected = Vec::with_capacity(nworkers);
    let mut first_error: Option<Error> = None;
    for (rank, outcome) in results.into_iter().enumerate() {
        match outcome {
            Ok(Ok(value)) => collected.push(value),
            Ok(Err(e)) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
            Err(payload) => {
                let message = panic_message(payload.as_ref());
                // A panic explains follow-on timeouts; always report it.
                first_error = Some(Error::WorkerPanicked { rank, message });
                break;
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(collected),
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}
