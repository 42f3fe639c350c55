use std::collections::HashMap;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::cost::{CostModel, TimingMode};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Timing of one completed all-reduce, in fabric nanoseconds (monotonic
/// since fabric creation, or virtual).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommSpan {
    pub seq: u64,
    pub bytes: usize,
    /// Latest issue time over all ranks.
    pub issued_ns: u64,
    /// When the transfer took the link (`≥ issued_ns`).
    pub start_ns: u64,
    /// When the reduced value became visible.
    pub end_ns: u64,
}

struct Completed {
    tensor: Tensor,
    span: CommSpan,
}

struct Slot {
    contribs: Vec<Option<Tensor>>,
    issued: Vec<u64>,
    arrived: usize,
    result: Option<Arc<Completed>>,
    collected: usize,
}

struct State {
    next_seq: Vec<u64>,
    slots: HashMap<u64, Slot>,
    link_free_at: u64,
    clocks: Vec<u64>,
    poisoned: Option<String>,
    outstanding: Vec<usize>,
    max_outstanding: Vec<usize>,
    barrier_waiting: usize,
    barrier_generation: u64,
    barrier_clock: u64,
}

struct Shared {
    world: usize,
    cost: CostModel,
    epoch: Instant,
    state: Mutex<State>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        // a panicking rank must not wedge the others; the state stays usable
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait<'a>(&self, guard: MutexGuard<'a, State>) -> MutexGuard<'a, State> {
        self.changed.wait(guard).unwrap_or_else(|e| e.into_inner())
    }

    fn wallclock_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn now(&self, rank: usize) -> u64 {
        match self.cost.mode {
            TimingMode::Wallclock => self.wallclock_ns(),
            TimingMode::Simulated => self.lock().clocks[rank],
        }
    }

    fn poison(&self, msg: String) {
        let mut st = self.lock();
        st.poisoned.get_or_insert(msg);
        drop(st);
        self.changed.notify_all();
    }

    fn fabric_error(st: &State) -> Option<Error> {
        st.poisoned.as_ref().map(|m| Error::Fabric(m.clone()))
    }
}

/// In-process collective fabric connecting `world` rank contexts.
///
/// Reductions run on a fabric-owned worker thread. The reduced value is the
/// elementwise sum in ascending rank order and does not depend on timing;
/// the cost model only delays when a waiting rank may observe it.
pub struct Fabric {
    shared: Arc<Shared>,
    to_worker: Mutex<Option<Sender<u64>>>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl Fabric {
    pub fn new(world: usize, cost: CostModel) -> Result<Self> {
        if world == 0 {
            return Err(Error::config("fabric world size must be positive"));
        }
        cost.validate()?;
        let shared = Arc::new(Shared {
            world,
            cost,
            epoch: Instant::now(),
            state: Mutex::new(State {
                next_seq: vec![0; world],
                slots: HashMap::new(),
                link_free_at: 0,
                clocks: vec![0; world],
                poisoned: None,
                outstanding: vec![0; world],
                max_outstanding: vec![0; world],
                barrier_waiting: 0,
                barrier_generation: 0,
                barrier_clock: 0,
            }),
            changed: Condvar::new(),
        });
        let (tx, rx) = mpsc::channel();
        let worker_shared = Arc::clone(&shared);
        let worker = thread::Builder::new()
            .name("fabric-reduce".into())
            .spawn(move || reduce_loop(worker_shared, rx))?;
        Ok(Self {
            shared,
            to_worker: Mutex::new(Some(tx)),
            worker: Mutex::new(Some(worker)),
        })
    }

    pub fn world(&self) -> usize {
        self.shared.world
    }

    pub fn cost(&self) -> &CostModel {
        &self.shared.cost
    }

    pub fn mode(&self) -> TimingMode {
        self.shared.cost.mode
    }

    /// Current time of `rank` in fabric nanoseconds.
    pub fn now(&self, rank: usize) -> u64 {
        self.shared.now(rank)
    }

    /// Moves a rank's virtual clock forward. No effect in wallclock mode.
    pub fn advance(&self, rank: usize, ns: u64) {
        if self.mode() == TimingMode::Simulated {
            self.shared.lock().clocks[rank] += ns;
        }
    }

    /// Largest number of simultaneously outstanding collectives seen on `rank`.
    pub fn max_outstanding(&self, rank: usize) -> usize {
        self.shared.lock().max_outstanding[rank]
    }

    /// Starts an all-reduce of `tensor` and returns immediately.
    ///
    /// Every rank must issue the same sequence of collectives with matching
    /// shapes. A shape mismatch poisons the fabric for everyone.
    pub fn all_reduce_async(&self, rank: usize, tensor: Tensor) -> Result<Handle> {
        let sh = &self.shared;
        if rank >= sh.world {
            return Err(Error::config(format!("rank {rank} outside world {}", sh.world)));
        }
        if sh.world == 1 {
            return Ok(Handle::noop(tensor));
        }
        let issued = sh.now(rank);
        let mut st = sh.lock();
        if let Some(e) = Shared::fabric_error(&st) {
            return Err(e);
        }
        let seq = st.next_seq[rank];
        st.next_seq[rank] += 1;
        let world = sh.world;
        let slot = st.slots.entry(seq).or_insert_with(|| Slot {
            contribs: vec![None; world],
            issued: vec![0; world],
            arrived: 0,
            result: None,
            collected: 0,
        });
        if let Some(other) = slot.contribs.iter().flatten().next() {
            if other.shape() != tensor.shape() {
                let msg = format!(
                    "all-reduce #{seq}: rank {rank} contributed shape {:?}, another rank {:?}",
                    tensor.shape(),
                    other.shape()
                );
                drop(st);
                sh.poison(msg.clone());
                return Err(Error::Fabric(msg));
            }
        }
        slot.contribs[rank] = Some(tensor);
        slot.issued[rank] = issued;
        slot.arrived += 1;
        let complete = slot.arrived == world;
        st.outstanding[rank] += 1;
        st.max_outstanding[rank] = st.max_outstanding[rank].max(st.outstanding[rank]);
        drop(st);
        if complete {
            let tx = self.to_worker.lock().unwrap_or_else(|e| e.into_inner());
            match tx.as_ref() {
                Some(tx) if tx.send(seq).is_ok() => {}
                _ => return Err(Error::Fabric("fabric shut down".into())),
            }
        }
        Ok(Handle {
            state: HandleState::Pending {
                shared: Arc::clone(sh),
                rank,
                seq,
            },
        })
    }

    /// `wait(all_reduce_async(..))` with nothing in between.
    pub fn all_reduce_sync(&self, rank: usize, tensor: Tensor) -> Result<Tensor> {
        self.all_reduce_async(rank, tensor)?.wait()
    }

    /// Returns once every rank has entered. In simulated mode all clocks
    /// leave the barrier at the latest entry time.
    pub fn barrier(&self, rank: usize) -> Result<()> {
        let sh = &self.shared;
        let mut st = sh.lock();
        if let Some(e) = Shared::fabric_error(&st) {
            return Err(e);
        }
        let generation = st.barrier_generation;
        st.barrier_clock = st.barrier_clock.max(st.clocks[rank]);
        st.barrier_waiting += 1;
        if st.barrier_waiting == sh.world {
            let t = st.barrier_clock;
            st.clocks.iter_mut().for_each(|c| *c = t);
            st.barrier_waiting = 0;
            st.barrier_clock = 0;
            st.barrier_generation += 1;
            drop(st);
            sh.changed.notify_all();
            return Ok(());
        }
        while st.barrier_generation == generation {
            if let Some(e) = Shared::fabric_error(&st) {
                return Err(e);
            }
            st = sh.wait(st);
        }
        Ok(())
    }

    /// Fails every pending and future operation with `msg`.
    pub fn poison(&self, msg: impl Into<String>) {
        self.shared.poison(msg.into());
    }

    pub fn shutdown(&self) {
        self.shared.poison("fabric shut down".into());
        self.to_worker.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(w) = self.worker.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = w.join();
        }
    }
}

impl Drop for Fabric {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn reduce_loop(shared: Arc<Shared>, rx: Receiver<u64>) {
    while let Ok(seq) = rx.recv() {
        let (contribs, last_issue) = {
            let mut st = shared.lock();
            let Some(slot) = st.slots.get_mut(&seq) else { continue };
            let contribs: Vec<Tensor> = slot
                .contribs
                .iter_mut()
                .map(|c| c.take().expect("all ranks arrived"))
                .collect();
            (contribs, slot.issued.iter().copied().max().unwrap_or(0))
        };
        let bytes = contribs[0].size_bytes();
        let mut iter = contribs.into_iter();
        let mut sum = iter.next().expect("world >= 2");
        for t in iter {
            tensor::add_assign(&mut sum, &t).expect("shapes checked at issue");
        }
        let cost = &shared.cost;
        let mut st = shared.lock();
        let start = last_issue.max(st.link_free_at);
        st.link_free_at = start + cost.occupancy_ns(bytes);
        let end = st.link_free_at + cost.latency_ns();
        if let Some(slot) = st.slots.get_mut(&seq) {
            slot.result = Some(Arc::new(Completed {
                tensor: sum,
                span: CommSpan {
                    seq,
                    bytes,
                    issued_ns: last_issue,
                    start_ns: start,
                    end_ns: end,
                },
            }));
        }
        drop(st);
        shared.changed.notify_all();
    }
}

enum HandleState {
    Ready { tensor: Tensor, span: Option<CommSpan> },
    Pending { shared: Arc<Shared>, rank: usize, seq: u64 },
}

/// Ticket for one rank's share of an in-flight all-reduce.
///
/// Single consumer; may be carried across layers by the owning rank. Waiting
/// is idempotent: later calls return the same tensor.
pub struct Handle {
    state: HandleState,
}

impl Handle {
    /// Already-complete handle carrying `tensor` unchanged.
    pub fn noop(tensor: Tensor) -> Self {
        Self {
            state: HandleState::Ready { tensor, span: None },
        }
    }

    /// Blocks the calling rank until the reduction is visible under the cost
    /// model, then returns the reduced tensor.
    pub fn wait(&mut self) -> Result<Tensor> {
        if let HandleState::Pending { shared, rank, seq } = &self.state {
            let (done, rank) = {
                let mut st = shared.lock();
                let done = loop {
                    if let Some(done) = st.slots.get(seq).and_then(|s| s.result.clone()) {
                        break done;
                    }
                    if let Some(e) = Shared::fabric_error(&st) {
                        return Err(e);
                    }
                    st = shared.wait(st);
                };
                let slot = st.slots.get_mut(seq).expect("slot present until all ranks collect");
                slot.collected += 1;
                if slot.collected == shared.world {
                    st.slots.remove(seq);
                }
                st.outstanding[*rank] -= 1;
                (done, *rank)
            };
            match shared.cost.mode {
                TimingMode::Wallclock => {
                    let now = shared.wallclock_ns();
                    if done.span.end_ns > now {
                        thread::sleep(Duration::from_nanos(done.span.end_ns - now));
                    }
                }
                TimingMode::Simulated => {
                    let mut st = shared.lock();
                    st.clocks[rank] = st.clocks[rank].max(done.span.end_ns);
                }
            }
            self.state = HandleState::Ready {
                tensor: done.tensor.clone(),
                span: Some(done.span),
            };
        }
        match &self.state {
            HandleState::Ready { tensor, .. } => Ok(tensor.clone()),
            HandleState::Pending { .. } => unreachable!("pending handle resolved above"),
        }
    }

    /// Timing of the collective once waited; `None` for no-op handles.
    pub fn span(&self) -> Option<CommSpan> {
        match &self.state {
            HandleState::Ready { span, .. } => *span,
            HandleState::Pending { .. } => None,
        }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self.state, HandleState::Ready { span: None, .. })
    }
}
