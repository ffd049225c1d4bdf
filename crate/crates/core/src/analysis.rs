//! Inactive periods, memory-demand timelines and activity characterization.

use std::io::Write;

use serde::Serialize;

use crate::trace::{ByteSize, TensorId, TensorKind, TensorRecord, Trace};

/// A run of consecutive kernels during which a tensor is not accessed.
///
/// `start_kernel..=end_kernel` are the idle kernels. The tensor is active in
/// `start_kernel - 1` and `end_kernel + 1` (modulo the kernel count when the
/// period wraps into the next iteration).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct InactivePeriod {
    pub tensor_id: TensorId,
    pub size: ByteSize,
    pub start_kernel: usize,
    pub end_kernel: usize,
    /// The next access falls in the following iteration.
    pub wraps: bool,
}

impl InactivePeriod {
    /// Idle kernels in order, each paired with its iteration offset
    /// (0 for this iteration, 1 for the next).
    pub fn kernels(&self, num_kernels: usize) -> Vec<(usize, u64)> {
        if !self.wraps {
            return (self.start_kernel..=self.end_kernel)
                .map(|k| (k, 0))
                .collect();
        }
        // last access was start_kernel - 1 (mod n); next access is end_kernel + 1 (mod n)
        let last = (self.start_kernel + num_kernels - 1) % num_kernels;
        let first = (self.end_kernel + 1) % num_kernels;
        let tail = (last + 1..num_kernels).map(|k| (k, 0));
        let head = (0..first).map(|k| (k, 1));
        tail.chain(head).collect()
    }

    /// Stall-free time at which the tensor stops being active
    /// (end of its bounding active kernel).
    pub fn ready_time(&self, starts: &[u64], iteration: u64) -> u64 {
        let n = starts.len();
        let last = (self.start_kernel + n - 1) % n;
        if self.wraps && last == n - 1 {
            iteration
        } else {
            starts[self.start_kernel]
        }
    }

    /// Stall-free start of the kernel that next needs the tensor.
    pub fn need_time(&self, starts: &[u64], iteration: u64) -> u64 {
        let n = starts.len();
        let next = (self.end_kernel + 1) % n;
        if self.wraps {
            iteration + starts[next]
        } else {
            starts[next]
        }
    }

    /// Sum of the idle kernels' durations.
    pub fn interior_duration(&self, durations: &[u64]) -> u64 {
        self.kernels(durations.len())
            .iter()
            .map(|&(k, _)| durations[k])
            .sum()
    }
}

fn tensor_periods(t: &TensorRecord, n: usize, out: &mut Vec<InactivePeriod>) {
    for w in t.accesses.windows(2) {
        if w[1] > w[0] + 1 {
            out.push(InactivePeriod {
                tensor_id: t.id,
                size: t.size,
                start_kernel: w[0] + 1,
                end_kernel: w[1] - 1,
                wraps: false,
            });
        }
    }
    if t.kind == TensorKind::Global {
        if let (Some(first), Some(last)) = (t.first_access(), t.last_access()) {
            let idle = (n - 1 - last) + first;
            if idle > 0 {
                out.push(InactivePeriod {
                    tensor_id: t.id,
                    size: t.size,
                    start_kernel: (last + 1) % n,
                    end_kernel: (first + n - 1) % n,
                    wraps: true,
                });
            }
        }
    }
}

/// All inactive periods of all tensors, in tensor order then time order.
pub fn compute_inactive_periods(trace: &Trace) -> Vec<InactivePeriod> {
    let n = trace.num_kernels();
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    for t in &trace.tensors {
        tensor_periods(t, n, &mut out);
    }
    out
}

/// Required GPU bytes per kernel (the `m_k` values).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemoryTimeline {
    pub per_kernel_bytes: Vec<u64>,
}

impl MemoryTimeline {
    pub fn peak(&self) -> u64 {
        self.per_kernel_bytes.iter().copied().max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.per_kernel_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_kernel_bytes.is_empty()
    }

    pub fn over_capacity(&self, capacity: u64) -> Vec<usize> {
        self.per_kernel_bytes
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > capacity)
            .map(|(k, _)| k)
            .collect()
    }
}

pub fn compute_memory_timeline(trace: &Trace) -> MemoryTimeline {
    let n = trace.num_kernels();
    let mut bytes = vec![0u64; n];
    for t in &trace.tensors {
        match t.kind {
            TensorKind::Global => bytes.iter_mut().for_each(|b| *b += t.size.0),
            TensorKind::Intermediate => {
                if let (Some(first), Some(last)) = (t.first_access(), t.last_access()) {
                    for b in &mut bytes[first..=last] {
                        *b += t.size.0;
                    }
                }
            }
        }
    }
    MemoryTimeline {
        per_kernel_bytes: bytes,
    }
}

/// Bytes of tensors accessed by each kernel.
pub fn active_bytes(trace: &Trace) -> Vec<u64> {
    let mut bytes = vec![0u64; trace.num_kernels()];
    for t in &trace.tensors {
        for &k in &t.accesses {
            bytes[k] += t.size.0;
        }
    }
    bytes
}

pub const MB: u64 = 1_000_000;
pub const GB: u64 = 1_000_000_000;

/// Histogram bucket edges. A value `v` falls into bucket `i` when
/// `edges[i] <= v < edges[i + 1]`; the last bucket is open-ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Buckets {
    pub edges: Vec<u64>,
}

impl Buckets {
    pub fn new(mut edges: Vec<u64>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        if edges.first() != Some(&0) {
            edges.insert(0, 0);
        }
        Buckets { edges }
    }

    /// Below 10 MB, 10 MB to 1 GB, 1 GB and above.
    pub fn default_sizes() -> Self {
        Buckets::new(vec![0, 10 * MB, GB])
    }

    /// Decades of microseconds from 1 ms to 1 s.
    pub fn default_durations() -> Self {
        Buckets::new(vec![0, 1_000, 10_000, 100_000, 1_000_000])
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn index_of(&self, v: u64) -> usize {
        self.edges.partition_point(|&e| e <= v) - 1
    }

    pub fn bounds(&self, i: usize) -> (u64, Option<u64>) {
        (self.edges[i], self.edges.get(i + 1).copied())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramCell {
    pub size_lo: u64,
    pub size_hi: Option<u64>,
    pub duration_lo_us: u64,
    pub duration_hi_us: Option<u64>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CharacterizationReport {
    pub capacity: u64,
    pub active_bytes: Vec<u64>,
    pub required_bytes: Vec<u64>,
    pub active_fraction: Vec<f64>,
    /// Row-major over (size bucket, duration bucket).
    pub histogram: Vec<HistogramCell>,
    pub mean_active_fraction: f64,
    pub max_active_fraction: f64,
    pub total_periods: u64,
}

#[derive(Debug, thiserror::Error)]
#[error("capacity must be positive")]
pub struct ZeroCapacity;

pub fn characterize(
    trace: &Trace,
    capacity: ByteSize,
    size_buckets: &Buckets,
    duration_buckets: &Buckets,
) -> Result<CharacterizationReport, ZeroCapacity> {
    if capacity.0 == 0 {
        return Err(ZeroCapacity);
    }
    let cap = capacity.0;
    let active = active_bytes(trace);
    let required = compute_memory_timeline(trace).per_kernel_bytes;
    let fraction: Vec<f64> = active.iter().map(|&b| b as f64 / cap as f64).collect();
    let mean = if fraction.is_empty() {
        0.0
    } else {
        fraction.iter().sum::<f64>() / fraction.len() as f64
    };
    let max = fraction.iter().copied().fold(0.0, f64::max);

    let durations = trace.durations();
    let mut counts = vec![0u64; size_buckets.len() * duration_buckets.len()];
    let periods = compute_inactive_periods(trace);
    for p in &periods {
        let s = size_buckets.index_of(p.size.0);
        let d = duration_buckets.index_of(p.interior_duration(&durations));
        counts[s * duration_buckets.len() + d] += 1;
    }
    let mut histogram = Vec::with_capacity(counts.len());
    for s in 0..size_buckets.len() {
        for d in 0..duration_buckets.len() {
            let (size_lo, size_hi) = size_buckets.bounds(s);
            let (duration_lo_us, duration_hi_us) = duration_buckets.bounds(d);
            histogram.push(HistogramCell {
                size_lo,
                size_hi,
                duration_lo_us,
                duration_hi_us,
                count: counts[s * duration_buckets.len() + d],
            });
        }
    }
    Ok(CharacterizationReport {
        capacity: cap,
        active_bytes: active,
        required_bytes: required,
        active_fraction: fraction,
        histogram,
        mean_active_fraction: mean,
        max_active_fraction: max,
        total_periods: periods.len() as u64,
    })
}

fn opt_cell(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CharacterizationReport {
    /// `kernel,active_bytes,required_bytes,active_fraction`
    pub fn write_kernels_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "kernel",
            "active_bytes",
            "required_bytes",
            "active_fraction",
        ])?;
        for (k, ((a, r), f)) in self
            .active_bytes
            .iter()
            .zip(&self.required_bytes)
            .zip(&self.active_fraction)
            .enumerate()
        {
            out.write_record([
                k.to_string(),
                a.to_string(),
                r.to_string(),
                format!("{f:.6}"),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `size_lo,size_hi,duration_lo_us,duration_hi_us,count`; an empty upper
    /// bound means unbounded.
    pub fn write_histogram_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "size_lo",
            "size_hi",
            "duration_lo_us",
            "duration_hi_us",
            "count",
        ])?;
        for c in &self.histogram {
            out.write_record([
                c.size_lo.to_string(),
                opt_cell(c.size_hi),
                c.duration_lo_us.to_string(),
                opt_cell(c.duration_hi_us),
                c.count.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
