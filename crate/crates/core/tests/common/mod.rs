//! Shared fixtures and brute-force oracles for the integration tests.

#![allow(dead_code)]

pub mod oracle_planner;
pub mod oracle_sim;

use offload_core::analysis::active_bytes;
use offload_core::{compute_memory_timeline, gen_random_trace, ChannelConfig, ChannelSpec, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random trace with a capacity between its largest kernel working set
/// and its peak, plus a random link setup.
pub struct Instance {
    pub trace: Trace,
    pub capacity: u64,
    pub channels: ChannelConfig,
    pub host_cap: Option<u64>,
}

pub fn instance(seed: u64, max_kernels: usize, max_tensors: usize) -> Instance {
    scaled_instance(seed, max_kernels, max_tensors, 1)
}

/// Like [`instance`] with sizes and durations divided by `shrink`, so that
/// per-microsecond oracles stay cheap while transfers still take several
/// kernels.
pub fn scaled_instance(seed: u64, max_kernels: usize, max_tensors: usize, shrink: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.random_range(1..=max_kernels);
    let m = rng.random_range(0..=max_tensors);
    let trace = gen_random_trace(
        seed,
        n,
        m,
        1..=1_000_000 / shrink,
        1..=(1_000 / shrink).max(1),
    );
    let max_active = active_bytes(&trace).into_iter().max().unwrap_or(0);
    let peak = compute_memory_timeline(&trace).peak();
    let capacity = rng.random_range(max_active.max(1)..=peak.max(max_active).max(1));
    let ssd = rng.random_bool(0.8).then(|| ChannelSpec {
        name: "ssd".into(),
        offload_rate_bytes_per_us: rng.random_range(100 / shrink..=100_000 / shrink) as f64,
        prefetch_rate_bytes_per_us: rng.random_range(100 / shrink..=100_000 / shrink) as f64,
    });
    let host = (ssd.is_none() || rng.random_bool(0.5)).then(|| {
        ChannelSpec::symmetric(
            "host",
            rng.random_range(100 / shrink..=200_000 / shrink) as f64,
        )
    });
    let host_cap = (host.is_some() && rng.random_bool(0.5)).then(|| rng.random_range(0..=peak));
    Instance {
        trace,
        capacity,
        channels: ChannelConfig { ssd, host },
        host_cap,
    }
}

/// A structurally valid trace with awkward names, extreme numbers and a
/// mixed metadata header, for format round trips.
pub fn fuzz_trace(seed: u64) -> Trace {
    use offload_core::{ByteSize, KernelRecord, TensorKind, TensorRecord, TimeMicros};
    use serde_json::json;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet: Vec<char> = "ab_Z09 \"\\/\n\t{}:,é中🦀\u{0}\u{7f}".chars().collect();
    let text = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.random_range(0..8);
        (0..len)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())])
            .collect()
    };
    let big = |rng: &mut ChaCha8Rng| match rng.random_range(0..3) {
        0 => rng.random_range(1..=100),
        1 => u64::MAX - rng.random_range(0..4),
        _ => rng.random_range(1..=u64::MAX),
    };
    let opt = |rng: &mut ChaCha8Rng| rng.random_bool(0.5).then(|| rng.random::<u32>());

    let n = rng.random_range(0..12);
    let kernels = (0..n)
        .map(|index| KernelRecord {
            index,
            name: text(&mut rng),
            duration: TimeMicros(big(&mut rng)),
            stage: opt(&mut rng),
            layer: opt(&mut rng),
        })
        .collect();
    let m = if n == 0 { 0 } else { rng.random_range(0..10) };
    let mut ids = std::collections::BTreeSet::new();
    while ids.len() < m {
        ids.insert(rng.random::<u32>());
    }
    let tensors = ids
        .into_iter()
        .map(|id| {
            let accesses: Vec<usize> = loop {
                let a: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
                if !a.is_empty() {
                    break a;
                }
            };
            TensorRecord {
                id,
                size: ByteSize(big(&mut rng)),
                kind: if rng.random_bool(0.5) {
                    TensorKind::Global
                } else {
                    TensorKind::Intermediate
                },
                accesses,
                layer: opt(&mut rng),
            }
        })
        .collect();
    let mut meta = offload_core::trace::Meta::new();
    for _ in 0..rng.random_range(0..4) {
        let value = match rng.random_range(0..5) {
            0 => json!(text(&mut rng)),
            1 => json!(rng.random::<i64>()),
            2 => json!(rng.random_bool(0.5)),
            3 => json!(null),
            _ => json!([text(&mut rng), { "k": rng.random::<u64>() }]),
        };
        meta.insert(text(&mut rng), value);
    }
    Trace {
        meta,
        kernels,
        tensors,
    }
}

/// One member of the fixed simulator fuzz corpus: at most six kernels and
/// four tensors with short transfers, plus an arbitrary hand-made plan.
pub struct SimCase {
    pub trace: Trace,
    pub capacity: u64,
    pub channels: ChannelConfig,
    pub random_plan: Vec<offload_core::PlanEntry>,
}

pub fn sim_case(seed: u64) -> SimCase {
    use offload_core::{Device, Direction, PlanEntry};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let m = rng.random_range(0..=4);
    let trace = gen_random_trace(seed, n, m, 1..=1000, 1..=50);
    let max_active = active_bytes(&trace).into_iter().max().unwrap_or(0);
    let peak = compute_memory_timeline(&trace).peak();
    let capacity = rng.random_range(max_active.max(1)..=peak.max(max_active).max(1));
    let channels = if rng.random_bool(0.5) {
        ChannelConfig::ssd_only(rng.random_range(5..=200) as f64)
    } else {
        ChannelConfig {
            ssd: Some(ChannelSpec::symmetric(
                "ssd",
                rng.random_range(5..=200) as f64,
            )),
            host: Some(ChannelSpec::symmetric(
                "host",
                rng.random_range(5..=200) as f64,
            )),
        }
    };
    let period = trace.iteration_time();
    let mut random_plan = Vec::new();
    if m > 0 {
        for _ in 0..rng.random_range(0..=4) {
            let tensor_id = trace.tensors[rng.random_range(0..m)].id;
            let offload = rng.random_bool(0.5);
            let trigger_time = rng.random_range(0..2 * period);
            random_plan.push(PlanEntry {
                tensor_id,
                action: if offload {
                    Direction::Offload
                } else {
                    Direction::Prefetch
                },
                trigger_time,
                deadline: trigger_time + rng.random_range(1..=period),
                target: if offload { Device::Ssd } else { Device::Gpu },
                urgent: false,
            });
        }
    }
    SimCase {
        trace,
        capacity,
        channels,
        random_plan,
    }
}
