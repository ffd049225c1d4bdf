//! Trace data model and the line-delimited JSON trace format.
//!
//! A trace describes one training iteration: the kernels in execution order
//! with their durations, and every tensor with its size, kind, and the
//! kernels in which it is active. Iterations repeat the same trace, so
//! global tensors are modeled as wrapping around the iteration boundary.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microseconds.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimeMicros(pub u64);

/// Bytes.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ByteSize(pub u64);

impl fmt::Display for TimeMicros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}B", self.0)
    }
}

pub type TensorId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub index: usize,
    pub name: String,
    pub duration: TimeMicros,
    pub stage: Option<u32>,
    pub layer: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    /// Allocated at first access, freed right after the last one.
    Intermediate,
    /// Weights, gradients and optimizer state: resident for the whole run.
    Global,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub id: TensorId,
    pub size: ByteSize,
    pub kind: TensorKind,
    /// Kernel indices where the tensor is active, strictly increasing.
    pub accesses: Vec<usize>,
    pub layer: Option<u32>,
}

impl TensorRecord {
    pub fn first_access(&self) -> Option<usize> {
        self.accesses.first().copied()
    }

    pub fn last_access(&self) -> Option<usize> {
        self.accesses.last().copied()
    }

    /// Whether the tensor occupies GPU memory during kernel `k`.
    pub fn is_resident_at(&self, k: usize) -> bool {
        match self.kind {
            TensorKind::Global => true,
            TensorKind::Intermediate => match (self.first_access(), self.last_access()) {
                (Some(first), Some(last)) => first <= k && k <= last,
                _ => false,
            },
        }
    }

    pub fn is_active_at(&self, k: usize) -> bool {
        self.accesses.binary_search(&k).is_ok()
    }
}

pub type Meta = BTreeMap<String, serde_json::Value>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub meta: Meta,
    pub kernels: Vec<KernelRecord>,
    pub tensors: Vec<TensorRecord>,
}

impl Trace {
    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn durations(&self) -> Vec<u64> {
        self.kernels.iter().map(|k| k.duration.0).collect()
    }

    /// Start time of every kernel on the stall-free timeline.
    pub fn kernel_starts(&self) -> Vec<u64> {
        let mut acc = 0u64;
        self.kernels
            .iter()
            .map(|k| {
                let start = acc;
                acc += k.duration.0;
                start
            })
            .collect()
    }

    /// Length of one stall-free iteration.
    pub fn iteration_time(&self) -> u64 {
        self.kernels.iter().map(|k| k.duration.0).sum()
    }

    pub fn tensor(&self, id: TensorId) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.id == id)
    }

    /// Kernel index -> ids of tensors active in it.
    pub fn active_sets(&self) -> Vec<Vec<TensorId>> {
        let mut sets = vec![Vec::new(); self.kernels.len()];
        for t in &self.tensors {
            for &k in &t.accesses {
                if let Some(set) = sets.get_mut(k) {
                    set.push(t.id);
                }
            }
        }
        for set in &mut sets {
            set.sort_unstable();
        }
        sets
    }
}

/// One broken trace invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    KernelIndexMismatch {
        position: usize,
        index: usize,
    },
    ZeroDuration {
        kernel: usize,
    },
    DuplicateTensorId {
        tensor: TensorId,
    },
    ZeroSize {
        tensor: TensorId,
    },
    EmptyAccesses {
        tensor: TensorId,
    },
    AccessesNotIncreasing {
        tensor: TensorId,
    },
    AccessOutOfRange {
        tensor: TensorId,
        access: usize,
        num_kernels: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KernelIndexMismatch { position, index } => {
                write!(f, "kernel at position {position} has index {index}")
            }
            Violation::ZeroDuration { kernel } => write!(f, "kernel {kernel} has zero duration"),
            Violation::DuplicateTensorId { tensor } => {
                write!(f, "tensor {tensor} is defined more than once")
            }
            Violation::ZeroSize { tensor } => write!(f, "tensor {tensor} has zero size"),
            Violation::EmptyAccesses { tensor } => write!(f, "tensor {tensor} has no accesses"),
            Violation::AccessesNotIncreasing { tensor } => {
                write!(f, "tensor {tensor} accesses are not strictly increasing")
            }
            Violation::AccessOutOfRange {
                tensor,
                access,
                num_kernels,
            } => write!(
                f,
                "tensor {tensor} accesses kernel {access} but the trace has {num_kernels} kernels"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid trace: {0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lists every broken invariant; empty iff the trace is well formed.
pub fn validate_trace(trace: &Trace) -> ValidationReport {
    let mut violations = Vec::new();
    let n = trace.kernels.len();
    for (position, k) in trace.kernels.iter().enumerate() {
        if k.index != position {
            violations.push(Violation::KernelIndexMismatch {
                position,
                index: k.index,
            });
        }
        if k.duration.0 == 0 {
            violations.push(Violation::ZeroDuration { kernel: k.index });
        }
    }
    let mut seen = HashSet::new();
    for t in &trace.tensors {
        if !seen.insert(t.id) {
            violations.push(Violation::DuplicateTensorId { tensor: t.id });
        }
        if t.size.0 == 0 {
            violations.push(Violation::ZeroSize { tensor: t.id });
        }
        if t.accesses.is_empty() {
            violations.push(Violation::EmptyAccesses { tensor: t.id });
        }
        if t.accesses.windows(2).any(|w| w[0] >= w[1]) {
            violations.push(Violation::AccessesNotIncreasing { tensor: t.id });
        }
        for &access in &t.accesses {
            if access >= n {
                violations.push(Violation::AccessOutOfRange {
                    tensor: t.id,
                    access,
                    num_kernels: n,
                });
            }
        }
    }
    ValidationReport { violations }
}

// Wire records. Field names are part of the file format.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    version: u32,
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelLine {
    index: usize,
    name: String,
    duration_us: u64,
    stage: Option<u32>,
    layer: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorLine {
    id: TensorId,
    size_bytes: u64,
    kind: TensorKind,
    accesses: Vec<usize>,
    layer: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum RecordLine {
    Kernel(KernelLine),
    Tensor(TensorLine),
}

pub const FORMAT_VERSION: u32 = 1;

/// Parses and validates a trace stream.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut trace = Trace::default();
    let mut header_seen = false;
    let mut tensors_started = false;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        if !header_seen {
            let header: HeaderLine = serde_json::from_str(&line).map_err(parse_err)?;
            if header.version != FORMAT_VERSION {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: format!("unsupported trace version {}", header.version),
                });
            }
            trace.meta = header.meta;
            header_seen = true;
            continue;
        }
        match serde_json::from_str::<RecordLine>(&line).map_err(parse_err)? {
            RecordLine::Kernel(k) => {
                if tensors_started {
                    return Err(TraceError::Parse {
                        line: line_no,
                        message: "kernel record after tensor records".into(),
                    });
                }
                trace.kernels.push(KernelRecord {
                    index: k.index,
                    name: k.name,
                    duration: TimeMicros(k.duration_us),
                    stage: k.stage,
                    layer: k.layer,
                });
            }
            RecordLine::Tensor(t) => {
                tensors_started = true;
                trace.tensors.push(TensorRecord {
                    id: t.id,
                    size: ByteSize(t.size_bytes),
                    kind: t.kind,
                    accesses: t.accesses,
                    layer: t.layer,
                });
            }
        }
    }
    if !header_seen {
        return Err(TraceError::Parse {
            line: 1,
            message: "missing header line".into(),
        });
    }
    let report = validate_trace(&trace);
    if !report.is_empty() {
        return Err(TraceError::Invalid(report));
    }
    Ok(trace)
}

pub fn parse_trace_str(s: &str) -> Result<Trace, TraceError> {
    parse_trace(s.as_bytes())
}

pub fn write_trace<W: Write>(trace: &Trace, mut w: W) -> std::io::Result<()> {
    let header = HeaderLine {
        version: FORMAT_VERSION,
        meta: trace.meta.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for k in &trace.kernels {
        let rec = RecordLine::Kernel(KernelLine {
            index: k.index,
            name: k.name.clone(),
            duration_us: k.duration.0,
            stage: k.stage,
            layer: k.layer,
        });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    for t in &trace.tensors {
        let rec = RecordLine::Tensor(TensorLine {
            id: t.id,
            size_bytes: t.size.0,
            kind: t.kind,
            accesses: t.accesses.clone(),
            layer: t.layer,
        });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trace_string(trace: &Trace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Five kernels of 10 ms; tensor 0 (100 MB) used at kernels 0 and 4,
/// tensor 1 (100 MB) used only at kernel 2.
pub fn example_trace() -> Trace {
    let kernels = (0..5)
        .map(|i| KernelRecord {
            index: i,
            name: format!("k{i}"),
            duration: TimeMicros(10_000),
            stage: None,
            layer: None,
        })
        .collect();
    let tensors = vec![
        TensorRecord {
            id: 0,
            size: ByteSize(100_000_000),
            kind: TensorKind::Intermediate,
            accesses: vec![0, 4],
            layer: None,
        },
        TensorRecord {
            id: 1,
            size: ByteSize(100_000_000),
            kind: TensorKind::Intermediate,
            accesses: vec![2],
            layer: None,
        },
    ];
    Trace {
        meta: Meta::new(),
        kernels,
        tensors,
    }
}
