//! Discrete-event execution of one training iteration.
//!
//! Kernels run back to back on the GPU. Before a kernel launches, every
//! tensor it touches must be resident and idle, and its working set must
//! fit. Tensors move over serial channels (one per device and direction)
//! in response to plan entries, layer batches or at-need fallbacks.
//!
//! Events at the same microsecond are handled in a fixed order:
//!
//! 1. transfer completions, by tensor id
//! 2. kernel completion, which frees intermediates at their last access
//! 3. the launch gate for the next kernel
//! 4. plan triggers that fall due
//! 5. dispatch of pending transfers onto idle channels
//!
//! Plans are expressed on the stall-free timeline. A plan time `r` (folded
//! into one iteration) is anchored to the kernel whose `(start, end]`
//! contains it and fires at the same offset from that kernel's actual
//! start, so a stall shifts every later trigger with it.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::bandwidth::{transfer_duration, ChannelConfig, ChannelError, Device, Direction};
use crate::planner::PlanEntry;
use crate::trace::{TensorId, TensorKind, TimeMicros, Trace};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("kernel {kernel} alone needs {active} bytes, more than the capacity of {capacity}")]
    Unsatisfiable {
        kernel: usize,
        active: u64,
        capacity: u64,
    },
    #[error("plan refers to unknown tensor {0}")]
    UnknownTensor(TensorId),
    #[error("plan entry for tensor {0} has an impossible target")]
    BadEntry(TensorId),
    #[error("no {0} channel configured")]
    MissingChannel(Device),
    #[error("kernel {0} has no layer id")]
    MissingKernelLayer(usize),
    #[error("tensor {0} has no layer id")]
    MissingTensorLayer(TensorId),
    #[error("layer map does not match the trace")]
    LayerMapMismatch,
    #[error("no progress possible at {time} us while waiting to launch kernel {kernel}")]
    Deadlock { time: u64, kernel: usize },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TransferRecord {
    pub tensor_id: TensorId,
    pub direction: Direction,
    /// Off-GPU end of the transfer.
    pub device: Device,
    pub channel: String,
    pub start: u64,
    pub end: u64,
    pub urgent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub policy: String,
    pub total_time: TimeMicros,
    pub ideal_time: TimeMicros,
    pub per_kernel_start: Vec<u64>,
    pub stall_per_kernel: Vec<u64>,
    /// GPU bytes in use right after each launch.
    pub resident_at_launch: Vec<u64>,
    pub stall_time_total: TimeMicros,
    pub peak_resident_bytes: u64,
    pub channel_utilization: BTreeMap<String, f64>,
    pub emergency_offloads: u64,
    pub throughput_vs_ideal: f64,
    #[serde(skip)]
    pub transfers: Vec<TransferRecord>,
}

#[derive(Serialize)]
struct TimelineRow {
    kernel: usize,
    start_us: u64,
    stall_us: u64,
    resident_bytes: u64,
}

#[derive(Serialize)]
struct UtilizationRow<'a> {
    channel: &'a str,
    window_start_us: u64,
    window_end_us: u64,
    utilization: String,
}

impl SimReport {
    pub fn write_json<W: Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, self)
    }

    /// `kernel,start_us,stall_us,resident_bytes`
    pub fn write_timeline_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for k in 0..self.per_kernel_start.len() {
            out.serialize(TimelineRow {
                kernel: k,
                start_us: self.per_kernel_start[k],
                stall_us: self.stall_per_kernel[k],
                resident_bytes: self.resident_at_launch[k],
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// Busy fraction of every channel over consecutive windows of `window` us.
    pub fn write_utilization_csv<W: Write>(&self, w: W, window: u64) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let total = self.total_time.0;
        let window = window.max(1);
        for name in self.channel_utilization.keys() {
            let mut lo = 0;
            while lo < total {
                let hi = (lo + window).min(total);
                let busy: u64 = self
                    .transfers
                    .iter()
                    .filter(|t| &t.channel == name)
                    .map(|t| t.end.min(hi).saturating_sub(t.start.max(lo)))
                    .sum();
                out.serialize(UtilizationRow {
                    channel: name,
                    window_start_us: lo,
                    window_end_us: hi,
                    utilization: format!("{:.6}", busy as f64 / (hi - lo) as f64),
                })?;
                lo = hi;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Time of one iteration with unlimited GPU memory.
pub fn simulate_ideal(trace: &Trace) -> TimeMicros {
    TimeMicros(trace.iteration_time())
}

/// Full report for a run with unlimited GPU memory and no transfers.
pub fn ideal_report(trace: &Trace) -> SimReport {
    Engine::new(trace, u64::MAX, &ChannelConfig::default(), "ideal")
        .and_then(|e| e.run())
        .expect("nothing can block without a capacity limit")
}

/// Layer id of every kernel and tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMap {
    pub kernel_layers: Vec<u32>,
    pub tensor_layers: BTreeMap<TensorId, u32>,
}

impl LayerMap {
    pub fn from_trace(trace: &Trace) -> Result<Self, SimError> {
        let kernel_layers = trace
            .kernels
            .iter()
            .enumerate()
            .map(|(i, k)| k.layer.ok_or(SimError::MissingKernelLayer(i)))
            .collect::<Result<_, _>>()?;
        let tensor_layers = trace
            .tensors
            .iter()
            .map(|t| {
                t.layer
                    .map(|l| (t.id, l))
                    .ok_or(SimError::MissingTensorLayer(t.id))
            })
            .collect::<Result<_, _>>()?;
        Ok(LayerMap {
            kernel_layers,
            tensor_layers,
        })
    }
}

pub fn simulate(
    trace: &Trace,
    plan: &[PlanEntry],
    capacity: u64,
    channels: &ChannelConfig,
) -> Result<SimReport, SimError> {
    let mut e = Engine::new(trace, capacity, channels, "lifetime-aware")?;
    e.load_plan(plan)?;
    e.run()
}

/// Every migration happens at the point of need.
pub fn simulate_on_demand(
    trace: &Trace,
    capacity: u64,
    channels: &ChannelConfig,
) -> Result<SimReport, SimError> {
    let mut e = Engine::new(trace, capacity, channels, "on-demand")?;
    e.baseline_start()?;
    e.run()
}

/// Whole layers move at once: a layer's tensors leave the GPU when its run of
/// kernels ends and come back in one batch ahead of its next run.
pub fn simulate_layer_granularity(
    trace: &Trace,
    capacity: u64,
    channels: &ChannelConfig,
    layers: &LayerMap,
) -> Result<SimReport, SimError> {
    let mut e = Engine::new(trace, capacity, channels, "layer-granularity")?;
    e.layers = Some(LayerPolicy::new(trace, layers)?);
    e.baseline_start()?;
    e.run()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Place {
    Unallocated,
    Gpu,
    Off(Device),
}

struct Chan {
    name: String,
    device: Device,
    direction: Direction,
    rate: f64,
    current: Option<usize>,
}

#[derive(Clone, Debug)]
struct Request {
    tensor: usize,
    direction: Direction,
    /// Destination of an offload.
    target: Device,
    urgent: bool,
    seq: u64,
    batch: Option<usize>,
}

enum Status {
    Drop,
    Wait,
    Ready(usize),
}

struct LayerPolicy {
    /// `(first kernel, last kernel, layer)` of each maximal same-layer run.
    segments: Vec<(usize, usize, u32)>,
    segment_of: Vec<usize>,
    tensor_layer: Vec<u32>,
    started: Vec<bool>,
    issued: Vec<bool>,
    outstanding: Vec<usize>,
}

impl LayerPolicy {
    fn new(trace: &Trace, map: &LayerMap) -> Result<Self, SimError> {
        if map.kernel_layers.len() != trace.num_kernels() {
            return Err(SimError::LayerMapMismatch);
        }
        let mut ids: Vec<TensorId> = trace.tensors.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        let tensor_layer = ids
            .iter()
            .map(|id| {
                map.tensor_layers
                    .get(id)
                    .copied()
                    .ok_or(SimError::MissingTensorLayer(*id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut segments: Vec<(usize, usize, u32)> = Vec::new();
        let mut segment_of = Vec::with_capacity(map.kernel_layers.len());
        for (k, &l) in map.kernel_layers.iter().enumerate() {
            match segments.last_mut() {
                Some(s) if s.2 == l => s.1 = k,
                _ => segments.push((k, k, l)),
            }
            segment_of.push(segments.len() - 1);
        }
        let n = segments.len();
        Ok(LayerPolicy {
            segments,
            segment_of,
            tensor_layer,
            started: vec![false; n],
            issued: vec![false; n],
            outstanding: vec![0; n],
        })
    }
}

/// Fire time, tensor id, whether it is a prefetch, tensor index, target.
type Trigger = (u64, TensorId, bool, usize, Device);

struct Engine<'a> {
    policy: &'static str,
    capacity: u64,
    n: usize,
    durations: Vec<u64>,
    plan_starts: Vec<u64>,
    iteration: u64,
    ids: Vec<TensorId>,
    sizes: Vec<u64>,
    kinds: Vec<TensorKind>,
    accesses: Vec<&'a [usize]>,
    needs: Vec<Vec<usize>>,
    place: Vec<Place>,
    moving: Vec<Option<usize>>,
    resident: u64,
    peak: u64,
    chans: Vec<Chan>,
    transfers: Vec<TransferRecord>,
    pending: Vec<Request>,
    seq: u64,
    now: u64,
    running: Option<(usize, u64)>,
    next_kernel: usize,
    blocked: Option<usize>,
    starts: Vec<u64>,
    resident_at_launch: Vec<u64>,
    emergency: u64,
    /// Plan entries anchored to each kernel: `(offset, tensor, direction, target)`.
    anchored: Vec<Vec<(u64, usize, Direction, Device)>>,
    armed: BinaryHeap<Reverse<Trigger>>,
    layers: Option<LayerPolicy>,
    /// Transfer index -> layer batch it belongs to.
    transfer_batch: BTreeMap<usize, usize>,
}

impl<'a> Engine<'a> {
    fn new(
        trace: &'a Trace,
        capacity: u64,
        config: &ChannelConfig,
        policy: &'static str,
    ) -> Result<Self, SimError> {
        config.validate()?;
        let n = trace.num_kernels();
        let mut order: Vec<usize> = (0..trace.tensors.len()).collect();
        order.sort_by_key(|&i| trace.tensors[i].id);
        let tensors: Vec<_> = order.iter().map(|&i| &trace.tensors[i]).collect();
        let mut needs = vec![Vec::new(); n];
        for (i, t) in tensors.iter().enumerate() {
            for &k in &t.accesses {
                needs[k].push(i);
            }
        }
        for (k, set) in needs.iter().enumerate() {
            let active: u64 = set.iter().map(|&i| tensors[i].size.0).sum();
            if active > capacity {
                return Err(SimError::Unsatisfiable {
                    kernel: k,
                    active,
                    capacity,
                });
            }
        }
        let mut chans = Vec::new();
        for (device, spec) in [Device::Ssd, Device::Host]
            .into_iter()
            .filter_map(|d| config.spec(d).map(|s| (d, s)))
        {
            for (direction, rate) in [
                (Direction::Offload, spec.offload_rate_bytes_per_us),
                (Direction::Prefetch, spec.prefetch_rate_bytes_per_us),
            ] {
                let name = config
                    .channel(device, direction)
                    .map(|c| c.name)
                    .unwrap_or_default();
                chans.push(Chan {
                    name,
                    device,
                    direction,
                    rate,
                    current: None,
                });
            }
        }
        let m = tensors.len();
        Ok(Engine {
            policy,
            capacity,
            n,
            durations: trace.durations(),
            plan_starts: trace.kernel_starts(),
            iteration: trace.iteration_time(),
            ids: tensors.iter().map(|t| t.id).collect(),
            sizes: tensors.iter().map(|t| t.size.0).collect(),
            kinds: tensors.iter().map(|t| t.kind).collect(),
            accesses: tensors.iter().map(|t| t.accesses.as_slice()).collect(),
            needs,
            place: tensors
                .iter()
                .map(|t| {
                    if t.kind == TensorKind::Global {
                        Place::Gpu
                    } else {
                        Place::Unallocated
                    }
                })
                .collect(),
            moving: vec![None; m],
            resident: tensors
                .iter()
                .filter(|t| t.kind == TensorKind::Global)
                .map(|t| t.size.0)
                .sum(),
            peak: 0,
            chans,
            transfers: Vec::new(),
            pending: Vec::new(),
            seq: 0,
            now: 0,
            running: None,
            next_kernel: 0,
            blocked: None,
            starts: Vec::with_capacity(n),
            resident_at_launch: Vec::with_capacity(n),
            emergency: 0,
            anchored: vec![Vec::new(); n],
            armed: BinaryHeap::new(),
            layers: None,
            transfer_batch: BTreeMap::new(),
        })
    }

    fn index_of(&self, id: TensorId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    fn chan(&self, device: Device, direction: Direction) -> Option<usize> {
        self.chans
            .iter()
            .position(|c| c.device == device && c.direction == direction)
    }

    /// SSD when present, otherwise host memory.
    fn spill_device(&self) -> Result<Device, SimError> {
        [Device::Ssd, Device::Host]
            .into_iter()
            .find(|&d| self.chan(d, Direction::Offload).is_some())
            .ok_or(SimError::MissingChannel(Device::Ssd))
    }

    fn next_use(&self, t: usize, k: usize) -> usize {
        let acc = self.accesses[t];
        let i = acc.partition_point(|&a| a < k);
        match acc.get(i) {
            Some(&a) => a,
            None => self.n + acc[0],
        }
    }

    /// Globals that start off-GPU because they do not all fit, farthest
    /// first use first.
    fn baseline_start(&mut self) -> Result<(), SimError> {
        if self.resident <= self.capacity {
            return Ok(());
        }
        let device = self.spill_device()?;
        let mut globals: Vec<usize> = (0..self.ids.len())
            .filter(|&t| self.place[t] == Place::Gpu)
            .collect();
        globals.sort_by_key(|&t| (Reverse(self.accesses[t][0]), t));
        for t in globals {
            if self.resident <= self.capacity {
                break;
            }
            self.place[t] = Place::Off(device);
            self.resident -= self.sizes[t];
        }
        Ok(())
    }

    /// Steady-state start from the plan: the state of every planned global
    /// at the end of the previous iteration, then the anchored triggers.
    fn load_plan(&mut self, plan: &[PlanEntry]) -> Result<(), SimError> {
        let mut resolved = Vec::with_capacity(plan.len());
        for e in plan {
            let t = self
                .index_of(e.tensor_id)
                .ok_or(SimError::UnknownTensor(e.tensor_id))?;
            let ok = match e.action {
                Direction::Offload => e.target != Device::Gpu,
                Direction::Prefetch => e.target == Device::Gpu,
            } && e.trigger_time < e.deadline;
            if !ok {
                return Err(SimError::BadEntry(e.tensor_id));
            }
            if e.action == Direction::Offload && self.chan(e.target, Direction::Offload).is_none() {
                return Err(SimError::MissingChannel(e.target));
            }
            resolved.push((t, e));
        }
        let period = self.iteration;
        if period == 0 {
            return Ok(());
        }
        // previous iteration's copy of each offload/prefetch pair; the first
        // pair that leaves a tensor off the GPU or moving wins
        let mut settled = vec![false; self.ids.len()];
        for &(t, p) in resolved
            .iter()
            .filter(|(_, e)| e.action == Direction::Prefetch)
        {
            if self.kinds[t] != TensorKind::Global || settled[t] {
                continue;
            }
            let Some(&(_, o)) = resolved
                .iter()
                .filter(|(u, e)| {
                    *u == t && e.action == Direction::Offload && e.trigger_time <= p.trigger_time
                })
                .max_by_key(|(_, e)| e.trigger_time)
            else {
                continue;
            };
            if o.trigger_time < period && period < o.deadline {
                let c = self
                    .chan(o.target, Direction::Offload)
                    .expect("checked above");
                if self.chans[c].current.is_none() {
                    self.start_at(
                        t,
                        c,
                        Direction::Offload,
                        o.target,
                        0,
                        o.deadline - period,
                        false,
                    );
                    settled[t] = true;
                }
            } else if o.deadline <= period && period <= p.trigger_time {
                self.place[t] = Place::Off(o.target);
                self.resident -= self.sizes[t];
                settled[t] = true;
            } else if p.trigger_time < period && period < p.deadline {
                let c = self
                    .chan(o.target, Direction::Prefetch)
                    .ok_or(SimError::MissingChannel(o.target))?;
                if self.chans[c].current.is_none() {
                    self.place[t] = Place::Off(o.target);
                    self.resident -= self.sizes[t];
                    self.start_at(
                        t,
                        c,
                        Direction::Prefetch,
                        o.target,
                        0,
                        p.deadline - period,
                        false,
                    );
                    settled[t] = true;
                }
            }
        }
        for (t, e) in resolved {
            let r = e.trigger_time % period;
            if r == 0 {
                self.armed.push(Reverse((
                    0,
                    self.ids[t],
                    e.action == Direction::Prefetch,
                    t,
                    e.target,
                )));
            } else {
                let k = self.plan_starts.partition_point(|&s| s < r) - 1;
                self.anchored[k].push((r - self.plan_starts[k], t, e.action, e.target));
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<SimReport, SimError> {
        if self.resident > self.capacity {
            self.spill_initial()?;
        }
        self.peak = self.resident;
        loop {
            self.complete_transfers();
            self.complete_kernel()?;
            self.gate()?;
            self.layer_batches();
            self.fire_triggers();
            self.dispatch()?;
            if self.next_kernel == self.n && self.running.is_none() {
                break;
            }
            let next = self
                .chans
                .iter()
                .filter_map(|c| c.current.map(|i| self.transfers[i].end))
                .chain(self.running.map(|(_, end)| end))
                .chain(self.armed.peek().map(|Reverse(a)| a.0))
                .min();
            match next {
                Some(t) => {
                    debug_assert!(t > self.now);
                    self.now = t;
                }
                None => {
                    return Err(SimError::Deadlock {
                        time: self.now,
                        kernel: self.next_kernel,
                    })
                }
            }
        }
        Ok(self.report())
    }

    /// Spill for plans whose steady state does not fit at time zero.
    fn spill_initial(&mut self) -> Result<(), SimError> {
        let device = self.spill_device()?;
        let mut idle: Vec<usize> = (0..self.ids.len())
            .filter(|&t| self.place[t] == Place::Gpu && self.moving[t].is_none())
            .collect();
        idle.sort_by_key(|&t| (Reverse(self.accesses[t][0]), t));
        for t in idle {
            if self.resident <= self.capacity {
                break;
            }
            self.place[t] = Place::Off(device);
            self.resident -= self.sizes[t];
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn start_at(
        &mut self,
        t: usize,
        c: usize,
        direction: Direction,
        device: Device,
        start: u64,
        end: u64,
        urgent: bool,
    ) {
        let i = self.transfers.len();
        self.transfers.push(TransferRecord {
            tensor_id: self.ids[t],
            direction,
            device,
            channel: self.chans[c].name.clone(),
            start,
            end,
            urgent,
        });
        self.chans[c].current = Some(i);
        self.moving[t] = Some(i);
        if direction == Direction::Prefetch {
            self.resident += self.sizes[t];
            self.peak = self.peak.max(self.resident);
        }
    }

    fn complete_transfers(&mut self) {
        let mut done: Vec<(TensorId, usize, usize)> = Vec::new();
        for (c, ch) in self.chans.iter().enumerate() {
            if let Some(i) = ch.current {
                if self.transfers[i].end == self.now {
                    done.push((self.transfers[i].tensor_id, c, i));
                }
            }
        }
        done.sort_unstable();
        let finished = done
            .iter()
            .map(|&(_, _, i)| self.transfer_batch.remove(&i))
            .collect();
        self.settle_batches(finished);
        for (id, c, i) in done {
            let t = self.index_of(id).expect("transfer of known tensor");
            self.chans[c].current = None;
            self.moving[t] = None;
            let rec = &self.transfers[i];
            match rec.direction {
                Direction::Offload => {
                    self.place[t] = Place::Off(rec.device);
                    self.resident -= self.sizes[t];
                }
                Direction::Prefetch => self.place[t] = Place::Gpu,
            }
        }
    }

    fn complete_kernel(&mut self) -> Result<(), SimError> {
        let Some((k, end)) = self.running else {
            return Ok(());
        };
        if end != self.now {
            return Ok(());
        }
        self.running = None;
        self.next_kernel = k + 1;
        for i in 0..self.needs[k].len() {
            let t = self.needs[k][i];
            if self.kinds[t] == TensorKind::Intermediate && *self.accesses[t].last().unwrap() == k {
                debug_assert_eq!(self.place[t], Place::Gpu);
                self.place[t] = Place::Unallocated;
                self.resident -= self.sizes[t];
            }
        }
        self.segment_end(k)
    }

    /// Layer policy: the run of kernels ending at `k` hands its layer's
    /// tensors back unless the next run needs them.
    fn segment_end(&mut self, k: usize) -> Result<(), SimError> {
        let Some(lp) = &self.layers else {
            return Ok(());
        };
        let s = lp.segment_of[k];
        let (_, last, layer) = lp.segments[s];
        if last != k {
            return Ok(());
        }
        let next = lp.segments.get(s + 1).map(|&(a, b, _)| (a, b));
        let victims: Vec<usize> = (0..self.ids.len())
            .filter(|&t| {
                lp.tensor_layer[t] == layer
                    && self.place[t] == Place::Gpu
                    && self.moving[t].is_none()
            })
            .filter(|&t| !self.has_pending(t, Direction::Offload))
            .filter(|&t| {
                let u = self.next_use(t, k + 1);
                !matches!(next, Some((a, b)) if a <= u && u <= b)
            })
            .collect();
        if victims.is_empty() {
            return Ok(());
        }
        let device = self.spill_device()?;
        for t in victims {
            self.push(t, Direction::Offload, device, false, None);
        }
        Ok(())
    }

    fn has_pending(&self, t: usize, direction: Direction) -> bool {
        self.pending
            .iter()
            .any(|r| r.tensor == t && r.direction == direction)
    }

    fn push(
        &mut self,
        tensor: usize,
        direction: Direction,
        target: Device,
        urgent: bool,
        batch: Option<usize>,
    ) {
        self.seq += 1;
        self.pending.push(Request {
            tensor,
            direction,
            target,
            urgent,
            seq: self.seq,
            batch,
        });
    }

    fn gate(&mut self) -> Result<(), SimError> {
        if self.running.is_some() || self.next_kernel >= self.n {
            return Ok(());
        }
        let k = self.next_kernel;
        let needed = self.needs[k].clone();
        let mut cancelled = Vec::new();
        self.pending.retain(|r| {
            let drop = r.direction == Direction::Offload && needed.contains(&r.tensor);
            if drop {
                cancelled.push(r.batch);
            }
            !drop
        });
        self.settle_batches(cancelled);

        let first_touch: u64 = needed
            .iter()
            .filter(|&&t| self.place[t] == Place::Unallocated)
            .map(|&t| self.sizes[t])
            .sum();
        let ready = needed.iter().all(|&t| {
            matches!(self.place[t], Place::Gpu | Place::Unallocated) && self.moving[t].is_none()
        });
        if ready && self.resident + first_touch <= self.capacity {
            self.launch(k);
            return Ok(());
        }
        self.blocked = Some(k);

        let mut off_needed = 0;
        for &t in &needed {
            if let Place::Off(dev) = self.place[t] {
                if self.moving[t].is_some() {
                    continue;
                }
                off_needed += self.sizes[t];
                match self
                    .pending
                    .iter_mut()
                    .find(|r| r.tensor == t && r.direction == Direction::Prefetch)
                {
                    Some(r) => r.urgent = true,
                    None => self.push(t, Direction::Prefetch, dev, true, None),
                }
            }
        }
        let demand = self.resident + off_needed + first_touch;
        let mut relief = 0;
        for t in 0..self.ids.len() {
            if needed.contains(&t) || self.place[t] != Place::Gpu {
                continue;
            }
            let in_flight =
                self.moving[t].is_some_and(|i| self.transfers[i].direction == Direction::Offload);
            if in_flight {
                relief += self.sizes[t];
            } else if let Some(r) = self
                .pending
                .iter_mut()
                .find(|r| r.tensor == t && r.direction == Direction::Offload)
            {
                r.urgent = true;
                relief += self.sizes[t];
            }
        }
        if demand <= relief + self.capacity {
            return Ok(());
        }
        let mut excess = demand - relief - self.capacity;
        let mut victims: Vec<usize> = (0..self.ids.len())
            .filter(|&t| {
                !needed.contains(&t) && self.place[t] == Place::Gpu && self.moving[t].is_none()
            })
            .filter(|&t| !self.has_pending(t, Direction::Offload))
            .collect();
        victims.sort_by_key(|&t| (Reverse(self.next_use(t, k)), t));
        if !victims.is_empty() {
            let device = self.spill_device()?;
            for t in victims {
                if excess == 0 {
                    break;
                }
                self.push(t, Direction::Offload, device, true, None);
                self.emergency += 1;
                excess = excess.saturating_sub(self.sizes[t]);
            }
        }
        Ok(())
    }

    fn launch(&mut self, k: usize) {
        for i in 0..self.needs[k].len() {
            let t = self.needs[k][i];
            if self.place[t] == Place::Unallocated {
                self.place[t] = Place::Gpu;
                self.resident += self.sizes[t];
            }
            debug_assert!(self.place[t] == Place::Gpu && self.moving[t].is_none());
        }
        assert!(self.resident <= self.capacity, "launch over capacity");
        self.peak = self.peak.max(self.resident);
        self.blocked = None;
        self.starts.push(self.now);
        self.resident_at_launch.push(self.resident);
        self.running = Some((k, self.now + self.durations[k]));
        for i in 0..self.anchored[k].len() {
            let (offset, t, direction, target) = self.anchored[k][i];
            self.armed.push(Reverse((
                self.now + offset,
                self.ids[t],
                direction == Direction::Prefetch,
                t,
                target,
            )));
        }
        if let Some(lp) = &mut self.layers {
            let s = lp.segment_of[k];
            lp.started[s] = true;
        }
    }

    /// Layer policy: the batch for run `s + 1` goes out once run `s` has
    /// started and its own batch is done.
    fn layer_batches(&mut self) {
        let Some(lp) = &self.layers else { return };
        let mut issue = Vec::new();
        for s in 0..lp.segments.len().saturating_sub(1) {
            if lp.started[s]
                && !lp.issued[s + 1]
                && lp.outstanding[s] == 0
                && (s == 0 || lp.issued[s])
            {
                issue.push(s + 1);
            }
        }
        for s in issue {
            let lp = self.layers.as_ref().unwrap();
            let (a, b, layer) = lp.segments[s];
            let batch: Vec<(usize, Device)> = (0..self.ids.len())
                .filter(|&t| lp.tensor_layer[t] == layer)
                .filter(|&t| self.accesses[t].iter().any(|&x| a <= x && x <= b))
                .filter_map(|t| self.heading_off(t).map(|d| (t, d)))
                .collect();
            let lp = self.layers.as_mut().unwrap();
            lp.issued[s] = true;
            lp.outstanding[s] = batch.len();
            for (t, d) in batch {
                self.push(t, Direction::Prefetch, d, false, Some(s));
            }
        }
    }

    /// Device a tensor is on or on its way to, if not the GPU.
    fn heading_off(&self, t: usize) -> Option<Device> {
        match self.place[t] {
            Place::Off(d) => (self.moving[t].is_none()).then_some(d),
            Place::Gpu => match self.moving[t] {
                Some(i) if self.transfers[i].direction == Direction::Offload => {
                    Some(self.transfers[i].device)
                }
                Some(_) => None,
                None => self
                    .pending
                    .iter()
                    .find(|r| r.tensor == t && r.direction == Direction::Offload)
                    .map(|r| r.target),
            },
            Place::Unallocated => None,
        }
    }

    fn settle_batches(&mut self, finished: Vec<Option<usize>>) {
        if let Some(lp) = &mut self.layers {
            for s in finished.into_iter().flatten() {
                lp.outstanding[s] -= 1;
            }
        }
    }

    fn fire_triggers(&mut self) {
        while let Some(Reverse((at, _, _, t, target))) = self.armed.peek().copied() {
            if at != self.now {
                break;
            }
            self.armed.pop();
            if target == Device::Gpu {
                let source = match self.place[t] {
                    Place::Off(d) => d,
                    _ => target,
                };
                self.push(t, Direction::Prefetch, source, false, None);
            } else {
                self.push(t, Direction::Offload, target, false, None);
            }
        }
    }

    fn classify(&self, r: &Request) -> Result<Status, SimError> {
        let t = r.tensor;
        let running = self.running.map(|(k, _)| k);
        match r.direction {
            Direction::Offload => {
                if self.place[t] != Place::Gpu {
                    return Ok(Status::Drop);
                }
                if self.moving[t].is_some() {
                    let offloading =
                        self.transfers[self.moving[t].unwrap()].direction == Direction::Offload;
                    return Ok(if offloading {
                        Status::Drop
                    } else {
                        Status::Wait
                    });
                }
                if self.blocked.is_some_and(|k| self.needs[k].contains(&t)) {
                    return Ok(Status::Drop);
                }
                if running.is_some_and(|k| self.needs[k].contains(&t)) {
                    return Ok(Status::Wait);
                }
                let c = self
                    .chan(r.target, Direction::Offload)
                    .ok_or(SimError::MissingChannel(r.target))?;
                Ok(Status::Ready(c))
            }
            Direction::Prefetch => match self.place[t] {
                Place::Unallocated => Ok(Status::Drop),
                Place::Gpu if self.moving[t].is_some() => Ok(Status::Wait),
                Place::Gpu => Ok(Status::Drop),
                Place::Off(_) if self.moving[t].is_some() => Ok(Status::Drop),
                Place::Off(d) => {
                    if self.blocked.is_some_and(|k| !self.needs[k].contains(&t)) {
                        return Ok(Status::Wait);
                    }
                    if self.resident + self.sizes[t] > self.capacity {
                        return Ok(Status::Wait);
                    }
                    let c = self
                        .chan(d, Direction::Prefetch)
                        .ok_or(SimError::MissingChannel(d))?;
                    Ok(Status::Ready(c))
                }
            },
        }
    }

    fn dispatch(&mut self) -> Result<(), SimError> {
        let mut queue = std::mem::take(&mut self.pending);
        queue.sort_by_key(|r| (!r.urgent, r.seq));
        let mut keep = Vec::with_capacity(queue.len());
        let mut finished = Vec::new();
        for r in queue {
            match self.classify(&r)? {
                Status::Drop => finished.push(r.batch),
                Status::Wait => keep.push(r),
                Status::Ready(c) if self.chans[c].current.is_some() => keep.push(r),
                Status::Ready(c) => {
                    let d = transfer_duration(self.chans[c].rate, self.sizes[r.tensor])?;
                    let device = self.chans[c].device;
                    self.start_at(
                        r.tensor,
                        c,
                        r.direction,
                        device,
                        self.now,
                        self.now + d,
                        r.urgent,
                    );
                    if let Some(s) = r.batch {
                        self.transfer_batch.insert(self.transfers.len() - 1, s);
                    }
                }
            }
        }
        keep.sort_by_key(|r| r.seq);
        self.pending = keep;
        self.settle_batches(finished);
        Ok(())
    }

    fn report(self) -> SimReport {
        let total = self
            .starts
            .last()
            .map_or(0, |&s| s + self.durations[self.n - 1]);
        let ideal = self.iteration;
        let mut stall = Vec::with_capacity(self.n);
        let mut prev_end = 0;
        for k in 0..self.n {
            stall.push(self.starts[k] - prev_end);
            prev_end = self.starts[k] + self.durations[k];
        }
        let mut utilization = BTreeMap::new();
        for ch in &self.chans {
            let busy: u64 = self
                .transfers
                .iter()
                .filter(|t| t.channel == ch.name)
                .map(|t| t.end.min(total).saturating_sub(t.start.min(total)))
                .sum();
            utilization.insert(
                ch.name.clone(),
                if total == 0 {
                    0.0
                } else {
                    busy as f64 / total as f64
                },
            );
        }
        SimReport {
            policy: self.policy.to_string(),
            total_time: TimeMicros(total),
            ideal_time: TimeMicros(ideal),
            stall_time_total: TimeMicros(stall.iter().sum()),
            per_kernel_start: self.starts,
            stall_per_kernel: stall,
            resident_at_launch: self.resident_at_launch,
            peak_resident_bytes: self.peak,
            channel_utilization: utilization,
            emergency_offloads: self.emergency,
            throughput_vs_ideal: if total == 0 {
                1.0
            } else {
                ideal as f64 / total as f64
            },
            transfers: self.transfers,
        }
    }
}
