//! Throughput as a function of migration bandwidth.
//!
//! The model runs two back-to-back iterations from a cold start with every
//! tensor on the GPU. Each inactive period that spans a kernel whose memory
//! requirement exceeds the capacity is offloaded and prefetched back:
//!
//! * offloads run first-in first-out in kernel order, each starting when the
//!   tensor's last use ends and the channel is free;
//! * prefetches run in order of need, each starting no earlier than the
//!   latest moment that would still meet every later deadline on the
//!   stall-free timeline, no earlier than its own offload's completion and
//!   no earlier than the previous prefetch's completion;
//! * a kernel starts when the previous one ends and all of its prefetches
//!   have landed.
//!
//! Capacity decides which periods move but is not enforced while running.

use std::io::Write;

use serde::Serialize;

use crate::analysis::{compute_inactive_periods, compute_memory_timeline};
use crate::bandwidth::{transfer_duration, ChannelError};
use crate::trace::Trace;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RooflinePoint {
    /// Bytes per microsecond in each direction.
    pub bandwidth: f64,
    pub normalized_throughput: f64,
    /// Length of the two simulated iterations.
    pub total_time: u64,
    pub stall_time: u64,
}

impl RooflinePoint {
    pub fn bandwidth_gbps(&self) -> f64 {
        self.bandwidth / 1_000.0
    }
}

/// One offloaded period of one of the two iterations, in unrolled kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Migration {
    size: u64,
    tensor_id: u32,
    /// Kernel after which the tensor leaves.
    last: usize,
    /// Kernel that needs it back.
    next: usize,
}

fn migrations(trace: &Trace, capacity: u64) -> Vec<Migration> {
    let n = trace.num_kernels();
    let m = compute_memory_timeline(trace);
    let mut out = Vec::new();
    for p in compute_inactive_periods(trace) {
        let pressured = p
            .kernels(n)
            .iter()
            .any(|&(k, _)| m.per_kernel_bytes[k] > capacity);
        if !pressured {
            continue;
        }
        let last = (p.start_kernel + n - 1) % n;
        let next = (p.end_kernel + 1) % n + if p.wraps { n } else { 0 };
        for it in 0..2 {
            let (l, f) = (last + it * n, next + it * n);
            if f < 2 * n {
                out.push(Migration {
                    size: p.size.0,
                    tensor_id: p.tensor_id,
                    last: l,
                    next: f,
                });
            }
        }
    }
    out
}

/// Runs the model at one bandwidth.
pub fn roofline_point(
    trace: &Trace,
    capacity: u64,
    bandwidth: f64,
) -> Result<RooflinePoint, ChannelError> {
    transfer_duration(bandwidth, 1)?;
    let n = trace.num_kernels();
    let durations = trace.durations();
    let ideal_total = 2 * trace.iteration_time();
    if n == 0 {
        return Ok(RooflinePoint {
            bandwidth,
            normalized_throughput: 1.0,
            total_time: 0,
            stall_time: 0,
        });
    }
    let dur = |k: usize| durations[k % n];
    let ideal_start: Vec<u64> = (0..2 * n)
        .scan(0u64, |acc, k| {
            let s = *acc;
            *acc += dur(k);
            Some(s)
        })
        .collect();

    let migs = migrations(trace, capacity);
    let d: Vec<u64> = migs
        .iter()
        .map(|m| transfer_duration(bandwidth, m.size))
        .collect::<Result<_, _>>()?;

    let mut off_order: Vec<usize> = (0..migs.len()).collect();
    off_order.sort_by_key(|&i| (migs[i].last, migs[i].tensor_id));
    let mut pre_order: Vec<usize> = (0..migs.len()).collect();
    pre_order.sort_by_key(|&i| (migs[i].next, migs[i].tensor_id));

    // latest start of each prefetch on the stall-free timeline
    let mut latest = vec![0u64; migs.len()];
    let mut bound = u64::MAX;
    for &i in pre_order.iter().rev() {
        let end = ideal_start[migs[i].next].min(bound);
        latest[i] = end.saturating_sub(d[i]);
        bound = latest[i];
    }

    let mut off_end = vec![0u64; migs.len()];
    let mut pre_end = vec![0u64; migs.len()];
    let (mut oi, mut pi) = (0, 0);
    let (mut off_free, mut pre_free) = (0u64, 0u64);
    let mut clock = 0u64;
    for k in 0..2 * n {
        let mut start = clock;
        while pi < pre_order.len() && migs[pre_order[pi]].next == k {
            let i = pre_order[pi];
            let s = latest[i].max(off_end[i]).max(pre_free);
            pre_end[i] = s + d[i];
            pre_free = pre_end[i];
            start = start.max(pre_end[i]);
            pi += 1;
        }
        clock = start + dur(k);
        while oi < off_order.len() && migs[off_order[oi]].last == k {
            let i = off_order[oi];
            let s = clock.max(off_free);
            off_end[i] = s + d[i];
            off_free = off_end[i];
            oi += 1;
        }
    }
    Ok(RooflinePoint {
        bandwidth,
        normalized_throughput: ideal_total as f64 / clock as f64,
        total_time: clock,
        stall_time: clock - ideal_total,
    })
}

/// One point per bandwidth, in input order.
pub fn roofline_curve(
    trace: &Trace,
    capacity: u64,
    bandwidths: &[f64],
) -> Result<Vec<RooflinePoint>, ChannelError> {
    bandwidths
        .iter()
        .map(|&b| roofline_point(trace, capacity, b))
        .collect()
}

/// Smallest integral bandwidth at which every round trip of both iterations,
/// run back to back, fits inside the shortest offloaded period. From there
/// on the model never stalls. `None` when no bandwidth is enough because
/// even one-microsecond transfers would not fit.
pub fn saturation_bandwidth(trace: &Trace, capacity: u64) -> Option<u64> {
    let durations = trace.durations();
    let n = durations.len();
    let migs = migrations(trace, capacity);
    if migs.is_empty() {
        return Some(1);
    }
    let window = migs
        .iter()
        .map(|m| (m.last + 1..m.next).map(|k| durations[k % n]).sum::<u64>())
        .min()
        .unwrap_or(0);
    let fits = |b: u64| 2 * migs.iter().map(|m| m.size.div_ceil(b)).sum::<u64>() <= window;
    let mut hi = migs.iter().map(|m| m.size).max().unwrap_or(1);
    if !fits(hi) {
        return None;
    }
    let mut lo = 1;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

#[derive(Serialize)]
struct CsvRow {
    bandwidth_gbps: String,
    normalized_throughput: String,
}

/// `bandwidth_gbps,normalized_throughput`
pub fn write_curve_csv<W: Write>(points: &[RooflinePoint], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(CsvRow {
            bandwidth_gbps: format!("{}", p.bandwidth_gbps()),
            normalized_throughput: format!("{:.6}", p.normalized_throughput),
        })?;
    }
    out.flush()?;
    Ok(())
}
