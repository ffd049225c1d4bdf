//! Lifetime-aware migration planning.
//!
//! The planner repeatedly picks the inactive period whose offload relieves
//! the most over-capacity memory per unit of transfer time, reserves
//! bandwidth for its offload and prefetch, and lowers the memory timeline
//! accordingly. It stops when every kernel fits on the GPU or when no
//! remaining period can help.
//!
//! All times are on the stall-free timeline of one iteration. Periods of
//! global tensors that wrap into the next iteration are planned in
//! unrolled time (`[0, 2 * iteration)`), and the bandwidth channels are
//! periodic so that a transfer spilling past the end of the iteration
//! blocks the start of the next one.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    active_bytes, compute_inactive_periods, compute_memory_timeline, InactivePeriod, MemoryTimeline,
};
use crate::bandwidth::{
    BandwidthChannel, ChannelConfig, ChannelError, Device, Direction, Reservation,
};
use crate::trace::{TensorId, TensorKind, Trace};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub tensor_id: TensorId,
    pub action: Direction,
    /// When the transfer is issued.
    pub trigger_time: u64,
    /// When the transfer is scheduled to complete.
    pub deadline: u64,
    pub target: Device,
    pub urgent: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateWindow {
    /// Offload completion: the tensor's memory is free from here on.
    pub t_offloaded: u64,
    /// Prefetch start: the tensor's memory is claimed again from here on.
    pub t_prefetch: u64,
    pub offload: Reservation,
    pub prefetch: Reservation,
    pub destination: Device,
}

impl CandidateWindow {
    /// Sum of offload and prefetch transfer time.
    pub fn cost(&self) -> u64 {
        self.offload.duration() + self.prefetch.duration()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Benefit {
    /// Bytes times microseconds of over-capacity memory removed.
    pub value: u128,
    pub critical_kernels: Vec<usize>,
}

/// One committed selection of the planning loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommittedMigration {
    pub period: InactivePeriod,
    pub window: CandidateWindow,
    pub benefit: Benefit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MigrationPlan {
    pub capacity: u64,
    /// Sorted by trigger time.
    pub entries: Vec<PlanEntry>,
    pub residual_timeline: MemoryTimeline,
    pub planned_host_bytes: u64,
    /// Kernels still over capacity after planning. Non-empty means the plan
    /// relies on runtime stalls.
    pub over_capacity_kernels: Vec<usize>,
    /// Selections in the order they were made.
    pub committed: Vec<CommittedMigration>,
}

impl MigrationPlan {
    pub fn has_warning(&self) -> bool {
        !self.over_capacity_kernels.is_empty()
    }

    pub fn residual_peak(&self) -> u64 {
        self.residual_timeline.peak()
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("kernel {kernel} alone needs {active} bytes, more than the capacity of {capacity}")]
    Unsatisfiable {
        kernel: usize,
        active: u64,
        capacity: u64,
    },
    #[error("no migration channel configured")]
    NoChannels,
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Trace quantities the planner needs over and over.
#[derive(Clone, Debug)]
pub struct Timing {
    pub starts: Vec<u64>,
    pub durations: Vec<u64>,
    pub iteration: u64,
}

impl Timing {
    pub fn of(trace: &Trace) -> Self {
        Timing {
            starts: trace.kernel_starts(),
            durations: trace.durations(),
            iteration: trace.iteration_time(),
        }
    }

    pub fn num_kernels(&self) -> usize {
        self.starts.len()
    }

    /// Unrolled `[start, end)` of a kernel in the given iteration.
    pub fn kernel_interval(&self, k: usize, iteration_offset: u64) -> (u64, u64) {
        let base = iteration_offset * self.iteration;
        (
            base + self.starts[k],
            base + self.starts[k] + self.durations[k],
        )
    }
}

/// Offload as early as the channel allows, prefetch as late as it allows.
/// `None` when the tensor would not be off the GPU for any time at all.
pub fn candidate_window(
    period: &InactivePeriod,
    offload: &BandwidthChannel,
    prefetch: &BandwidthChannel,
    destination: Device,
    timing: &Timing,
) -> Option<CandidateWindow> {
    if timing.num_kernels() == 0 {
        return None;
    }
    let bytes = period.size.0;
    let ready = period.ready_time(&timing.starts, timing.iteration);
    let deadline = period.need_time(&timing.starts, timing.iteration);
    let (off_start, t_offloaded) = offload.find_earliest(ready, bytes)?;
    let (t_prefetch, pre_end) = prefetch.find_latest(deadline, t_offloaded, bytes)?;
    if t_offloaded >= t_prefetch {
        return None;
    }
    Some(CandidateWindow {
        t_offloaded,
        t_prefetch,
        offload: Reservation {
            start: off_start,
            end: t_offloaded,
            tensor_id: period.tensor_id,
            channel: offload.name.clone(),
        },
        prefetch: Reservation {
            start: t_prefetch,
            end: pre_end,
            tensor_id: period.tensor_id,
            channel: prefetch.name.clone(),
        },
        destination,
    })
}

/// Kernels of the period that lie wholly inside the off-GPU window.
fn covered_kernels(
    window: &CandidateWindow,
    period: &InactivePeriod,
    timing: &Timing,
) -> Vec<usize> {
    period
        .kernels(timing.num_kernels())
        .into_iter()
        .filter(|&(k, it)| {
            let (s, e) = timing.kernel_interval(k, it);
            s >= window.t_offloaded && e <= window.t_prefetch
        })
        .map(|(k, _)| k)
        .collect()
}

/// Over-capacity time removed by taking the tensor off the GPU for the window.
pub fn candidate_benefit(
    window: &CandidateWindow,
    period: &InactivePeriod,
    residual: &MemoryTimeline,
    capacity: u64,
    timing: &Timing,
) -> Benefit {
    let critical: Vec<usize> = covered_kernels(window, period, timing)
        .into_iter()
        .filter(|&k| residual.per_kernel_bytes[k] > capacity)
        .collect();
    let time: u64 = critical.iter().map(|&k| timing.durations[k]).sum();
    Benefit {
        value: period.size.0 as u128 * time as u128,
        critical_kernels: critical,
    }
}

/// Host-memory use of committed host migrations, repeating every iteration.
#[derive(Clone, Debug, Default)]
struct HostLedger {
    period: u64,
    /// `[start, end)` in unrolled time with the bytes held.
    intervals: Vec<(u64, u64, u64)>,
}

impl HostLedger {
    fn copies(&self) -> impl Iterator<Item = (u64, u64, u64)> + '_ {
        let p = self.period as i128;
        self.intervals.iter().flat_map(move |&(s, e, b)| {
            (-2i128..=2).filter_map(move |j| {
                let (s, e) = (s as i128 + j * p, e as i128 + j * p);
                (e > 0).then_some((s.max(0) as u64, e as u64, b))
            })
        })
    }

    /// Peak bytes held at any instant of `[start, end)`.
    fn peak_within(&self, start: u64, end: u64) -> u64 {
        let live: Vec<_> = self
            .copies()
            .filter(|&(s, e, _)| s < end && e > start)
            .collect();
        let mut points: Vec<u64> = live.iter().map(|&(s, _, _)| s.max(start)).collect();
        points.push(start);
        points
            .into_iter()
            .map(|t| {
                live.iter()
                    .filter(|&&(s, e, _)| s <= t && t < e)
                    .map(|&(_, _, b)| b)
                    .sum()
            })
            .max()
            .unwrap_or(0)
    }

    fn peak(&self) -> u64 {
        if self.period == 0 {
            return 0;
        }
        self.peak_within(0, self.period)
    }
}

/// Mutable planning state: channel calendars and host-memory ledger.
#[derive(Clone, Debug)]
pub struct PlannerChannels {
    pub ssd: Option<(BandwidthChannel, BandwidthChannel)>,
    pub host: Option<(BandwidthChannel, BandwidthChannel)>,
    host_ledger: HostLedger,
    pub host_cap: u64,
}

impl PlannerChannels {
    /// Periodic channels for a workload whose iteration lasts `iteration`.
    pub fn new(
        config: &ChannelConfig,
        iteration: u64,
        host_cap: Option<u64>,
    ) -> Result<Self, PlanError> {
        config.validate()?;
        let pair = |d: Device| -> Option<(BandwidthChannel, BandwidthChannel)> {
            Some((
                config
                    .channel(d, Direction::Offload)?
                    .with_period(iteration),
                config
                    .channel(d, Direction::Prefetch)?
                    .with_period(iteration),
            ))
        };
        let ssd = pair(Device::Ssd);
        let host = pair(Device::Host);
        if ssd.is_none() && host.is_none() {
            return Err(PlanError::NoChannels);
        }
        Ok(PlannerChannels {
            ssd,
            host,
            host_ledger: HostLedger {
                period: iteration,
                intervals: Vec::new(),
            },
            host_cap: host_cap.unwrap_or(u64::MAX),
        })
    }

    pub fn planned_host_bytes(&self) -> u64 {
        self.host_ledger.peak()
    }

    /// Host bytes held at some instant of `[start, end)`.
    pub fn host_occupancy(&self, start: u64, end: u64) -> u64 {
        self.host_ledger.peak_within(start, end)
    }

    fn commit(&mut self, window: &CandidateWindow, bytes: u64) -> Result<(), PlanError> {
        let (off, pre) = match window.destination {
            Device::Ssd => self.ssd.as_mut(),
            Device::Host => self.host.as_mut(),
            Device::Gpu => None,
        }
        .expect("destination chosen from configured channels");
        off.insert(
            window.offload.start,
            window.offload.end,
            window.offload.tensor_id,
        )?;
        pre.insert(
            window.prefetch.start,
            window.prefetch.end,
            window.prefetch.tensor_id,
        )?;
        if window.destination == Device::Host {
            self.host_ledger
                .intervals
                .push((window.offload.start, window.prefetch.end, bytes));
        }
        Ok(())
    }
}

/// SSD first; host memory only when the SSD link cannot fit the window and
/// the host budget still has room for the tensor over the whole round trip.
pub fn select_destination(
    period: &InactivePeriod,
    channels: &PlannerChannels,
    timing: &Timing,
) -> Option<CandidateWindow> {
    if let Some((off, pre)) = &channels.ssd {
        if let Some(w) = candidate_window(period, off, pre, Device::Ssd, timing) {
            return Some(w);
        }
    }
    let (off, pre) = channels.host.as_ref()?;
    let w = candidate_window(period, off, pre, Device::Host, timing)?;
    let held = channels.host_occupancy(w.offload.start, w.prefetch.end);
    (held.saturating_add(period.size.0) <= channels.host_cap).then_some(w)
}

/// `a` beats `b`: higher benefit per unit cost; ties go to the lower tensor
/// id, then to the earlier period.
fn better(
    a: &(InactivePeriod, CandidateWindow, Benefit),
    b: &(InactivePeriod, CandidateWindow, Benefit),
) -> bool {
    let lhs = a.2.value * b.1.cost() as u128;
    let rhs = b.2.value * a.1.cost() as u128;
    match lhs.cmp(&rhs) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (a.0.tensor_id, a.0.start_kernel) < (b.0.tensor_id, b.0.start_kernel),
    }
}

/// Fails with the first kernel whose own working set exceeds `capacity`.
pub fn check_satisfiable(trace: &Trace, capacity: u64) -> Result<(), PlanError> {
    for (kernel, &active) in active_bytes(trace).iter().enumerate() {
        if active > capacity {
            return Err(PlanError::Unsatisfiable {
                kernel,
                active,
                capacity,
            });
        }
    }
    Ok(())
}

pub fn plan_migrations(
    trace: &Trace,
    capacity: u64,
    channels: &ChannelConfig,
    host_cap: Option<u64>,
) -> Result<MigrationPlan, PlanError> {
    check_satisfiable(trace, capacity)?;
    let timing = Timing::of(trace);
    let mut state = PlannerChannels::new(channels, timing.iteration, host_cap)?;
    let mut residual = compute_memory_timeline(trace);
    let mut remaining = compute_inactive_periods(trace);
    remaining.sort_by_key(|p| (p.tensor_id, p.start_kernel));
    let mut committed = Vec::new();
    let mut entries = Vec::new();

    while residual.peak() > capacity {
        let mut best: Option<(InactivePeriod, CandidateWindow, Benefit)> = None;
        // Windows only shrink as channels fill and the host budget only
        // tightens, so a period with no window now never gets one later.
        remaining.retain(|p| {
            let Some(window) = select_destination(p, &state, &timing) else {
                return false;
            };
            let benefit = candidate_benefit(&window, p, &residual, capacity, &timing);
            if benefit.value > 0 {
                let cand = (*p, window, benefit);
                if best.as_ref().is_none_or(|b| better(&cand, b)) {
                    best = Some(cand);
                }
            }
            true
        });
        let Some((period, window, benefit)) = best else {
            break;
        };
        debug!(
            "commit tensor {} kernels {}..={} to {} window [{}, {}) benefit {}",
            period.tensor_id,
            period.start_kernel,
            period.end_kernel,
            window.destination,
            window.t_offloaded,
            window.t_prefetch,
            benefit.value
        );
        state.commit(&window, period.size.0)?;
        for k in covered_kernels(&window, &period, &timing) {
            residual.per_kernel_bytes[k] -= period.size.0;
        }
        entries.push(PlanEntry {
            tensor_id: period.tensor_id,
            action: Direction::Offload,
            trigger_time: window.offload.start,
            deadline: window.offload.end,
            target: window.destination,
            urgent: false,
        });
        entries.push(PlanEntry {
            tensor_id: period.tensor_id,
            action: Direction::Prefetch,
            trigger_time: window.prefetch.start,
            deadline: window.prefetch.end,
            target: Device::Gpu,
            urgent: false,
        });
        remaining.retain(|p| p != &period);
        committed.push(CommittedMigration {
            period,
            window,
            benefit,
        });
    }

    sort_entries(&mut entries);
    mark_urgent(&mut entries, trace);
    Ok(MigrationPlan {
        capacity,
        over_capacity_kernels: residual.over_capacity(capacity),
        entries,
        residual_timeline: residual,
        planned_host_bytes: state.planned_host_bytes(),
        committed,
    })
}

pub fn sort_entries(entries: &mut [PlanEntry]) {
    entries.sort_by_key(|e| (e.trigger_time, e.tensor_id, e.action == Direction::Prefetch));
}

/// Flags every prefetch that completes exactly when its tensor is next
/// needed. Offloads are never urgent.
pub fn mark_urgent(entries: &mut [PlanEntry], trace: &Trace) {
    let starts = trace.kernel_starts();
    let iteration = trace.iteration_time();
    for e in entries.iter_mut() {
        e.urgent = false;
        if e.action != Direction::Prefetch {
            continue;
        }
        let Some(t) = trace.tensor(e.tensor_id) else {
            continue;
        };
        let this_iter = t.accesses.iter().map(|&a| starts[a]);
        let next_iter = t
            .accesses
            .iter()
            .filter(|_| t.kind == TensorKind::Global)
            .map(|&a| iteration + starts[a]);
        let next_use = this_iter
            .chain(next_iter)
            .filter(|&s| s >= e.trigger_time)
            .min();
        e.urgent = next_use == Some(e.deadline);
    }
}

// Plan file: a header line followed by one entry per line.

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanHeader {
    pub version: u32,
    pub capacity_bytes: u64,
    pub residual_peak_bytes: u64,
    pub planned_host_bytes: u64,
    pub warning: bool,
    pub over_capacity_kernels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    tensor: TensorId,
    action: Direction,
    trigger_us: u64,
    deadline_us: u64,
    target: Device,
    urgent: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanFile {
    pub header: PlanHeader,
    pub entries: Vec<PlanEntry>,
}

impl MigrationPlan {
    pub fn header(&self) -> PlanHeader {
        PlanHeader {
            version: 1,
            capacity_bytes: self.capacity,
            residual_peak_bytes: self.residual_peak(),
            planned_host_bytes: self.planned_host_bytes,
            warning: self.has_warning(),
            over_capacity_kernels: self.over_capacity_kernels.clone(),
        }
    }
}

pub fn write_plan<W: Write>(plan: &MigrationPlan, mut w: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, &plan.header())?;
    w.write_all(b"\n")?;
    for e in &plan.entries {
        let line = EntryLine {
            tensor: e.tensor_id,
            action: e.action,
            trigger_us: e.trigger_time,
            deadline_us: e.deadline,
            target: e.target,
            urgent: e.urgent,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum PlanFileError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_plan<R: BufRead>(reader: R) -> Result<PlanFile, PlanFileError> {
    let mut header = None;
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |e: serde_json::Error| PlanFileError::Parse {
            line: i + 1,
            message: e.to_string(),
        };
        if header.is_none() {
            header = Some(serde_json::from_str::<PlanHeader>(&line).map_err(err)?);
            continue;
        }
        let e: EntryLine = serde_json::from_str(&line).map_err(err)?;
        let consistent = match e.action {
            Direction::Offload => e.target != Device::Gpu,
            Direction::Prefetch => e.target == Device::Gpu,
        };
        if !consistent || e.trigger_us >= e.deadline_us {
            return Err(PlanFileError::Parse {
                line: i + 1,
                message: "inconsistent plan entry".into(),
            });
        }
        entries.push(PlanEntry {
            tensor_id: e.tensor,
            action: e.action,
            trigger_time: e.trigger_us,
            deadline: e.deadline_us,
            target: e.target,
            urgent: e.urgent,
        });
    }
    let header = header.ok_or(PlanFileError::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    Ok(PlanFile { header, entries })
}
