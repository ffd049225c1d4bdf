//! Fixed workloads shared by the benchmarks.

use offload_core::{
    compute_memory_timeline, gen_random_trace, gen_transformer_trace, ChannelConfig, ChannelSpec,
    Trace, TransformerGenConfig,
};

pub struct Workload {
    pub name: String,
    pub trace: Trace,
    pub capacity: u64,
    pub channels: ChannelConfig,
}

fn links() -> ChannelConfig {
    ChannelConfig {
        ssd: Some(ChannelSpec::symmetric("ssd", 12_000.0)),
        host: Some(ChannelSpec::symmetric("host", 25_000.0)),
    }
}

/// Standard transformer shape with `layers` layers, at half its peak memory.
pub fn transformer(layers: u32) -> Workload {
    let cfg = TransformerGenConfig {
        num_layers: layers,
        ..TransformerGenConfig::standard()
    };
    let trace = gen_transformer_trace(&cfg).expect("standard shape is valid");
    let capacity = compute_memory_timeline(&trace).peak() / 2;
    Workload {
        name: format!("transformer-{layers}"),
        trace,
        capacity,
        channels: links(),
    }
}

/// Random trace at 70% of its peak memory.
pub fn random(kernels: usize, tensors: usize) -> Workload {
    let trace = gen_random_trace(42, kernels, tensors, 1 << 20..=1 << 28, 100..=5_000);
    let peak = compute_memory_timeline(&trace).peak();
    let active = offload_core::analysis::active_bytes(&trace)
        .into_iter()
        .max()
        .unwrap_or(0);
    Workload {
        name: format!("random-{kernels}x{tensors}"),
        capacity: (peak / 10 * 7).max(active),
        trace,
        channels: links(),
    }
}

pub fn all() -> Vec<Workload> {
    vec![
        random(64, 32),
        random(512, 256),
        transformer(8),
        transformer(32),
    ]
}
