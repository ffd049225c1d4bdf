//! Synthetic traces.
//!
//! # Transformer traces
//!
//! One training iteration of a decoder stack with `L` layers, hidden size
//! `h`, `a` heads, batch `b`, sequence length `s` and `e` bytes per element.
//!
//! Kernels, in order:
//!
//! | kernels            | count | FLOPs                          |
//! |--------------------|-------|--------------------------------|
//! | `attn_fwd.l`       | L     | `8bsh^2 + 4bs^2h`              |
//! | `mlp_fwd.l`        | L     | `16bsh^2`                      |
//! | `mlp_bwd.l`        | L     | twice the forward kernel       |
//! | `attn_bwd.l`       | L     | twice the forward kernel       |
//! | `optimizer.l`      | L     | `OPTIMIZER_FLOPS_PER_PARAM * 12h^2` |
//!
//! The backward kernels run in reverse layer order. A kernel lasts
//! `ceil(flops / compute_rate)` microseconds scaled by a seeded factor in
//! `[0.95, 1.05]`.
//!
//! Tensors of layer `l`:
//!
//! | tensor     | kind         | bytes                    | used by                        |
//! |------------|--------------|--------------------------|--------------------------------|
//! | `w_attn`   | global       | `4h^2 e`                 | attn fwd, attn bwd, optimizer  |
//! | `w_mlp`    | global       | `8h^2 e`                 | mlp fwd, mlp bwd, optimizer    |
//! | `g_attn`   | global       | `4h^2 e`                 | attn bwd, optimizer            |
//! | `g_mlp`    | global       | `8h^2 e`                 | mlp bwd, optimizer             |
//! | `opt`      | global       | `2 * 12h^2 e`            | optimizer                      |
//! | `act_attn` | intermediate | `(4bsh + ab s^2) e`      | attn fwd, attn bwd             |
//! | `act_mlp`  | intermediate | `8bsh e`                 | mlp fwd, mlp bwd               |
//!
//! Every activation is alive from its forward kernel to its backward kernel,
//! so the peak is reached at the turn from forward to backward and equals
//! all globals plus all activations ([`transformer_peak_bytes`]).
//!
//! # Random traces
//!
//! [`gen_random_trace`] draws sizes, durations and access sets uniformly for
//! property tests. Output always passes validation.

use std::ops::RangeInclusive;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ByteSize, KernelRecord, Meta, TensorKind, TensorRecord, TimeMicros, Trace};

/// FLOPs charged per parameter by the optimizer kernel.
pub const OPTIMIZER_FLOPS_PER_PARAM: u64 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerGenConfig {
    pub num_layers: u32,
    pub hidden_dim: u64,
    pub num_heads: u64,
    pub batch: u64,
    pub seq_len: u64,
    pub bytes_per_element: u64,
    pub pipeline_stages: u32,
    /// FLOPs per microsecond.
    pub compute_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
#[error("{0} must be positive")]
pub struct ConfigError(pub &'static str);

impl TransformerGenConfig {
    /// 32 layers of width 4096 with 2048-token sequences in half precision.
    pub fn standard() -> Self {
        TransformerGenConfig {
            num_layers: 32,
            hidden_dim: 4096,
            num_heads: 32,
            batch: 4,
            seq_len: 2048,
            bytes_per_element: 2,
            pipeline_stages: 1,
            compute_rate: 400e6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let checks = [
            (self.num_layers as u64, "num_layers"),
            (self.hidden_dim, "hidden_dim"),
            (self.num_heads, "num_heads"),
            (self.batch, "batch"),
            (self.seq_len, "seq_len"),
            (self.bytes_per_element, "bytes_per_element"),
            (self.pipeline_stages as u64, "pipeline_stages"),
        ];
        for (v, name) in checks {
            if v == 0 {
                return Err(ConfigError(name));
            }
        }
        if !(self.compute_rate.is_finite() && self.compute_rate > 0.0) {
            return Err(ConfigError("compute_rate"));
        }
        Ok(())
    }

    fn params_per_layer(&self) -> u64 {
        12 * self.hidden_dim * self.hidden_dim
    }

    /// Bytes of the seven tensors of one layer, in id order.
    pub fn layer_tensor_sizes(&self) -> [u64; 7] {
        let (h, e, b, s, a) = (
            self.hidden_dim,
            self.bytes_per_element,
            self.batch,
            self.seq_len,
            self.num_heads,
        );
        [
            4 * h * h * e,
            8 * h * h * e,
            4 * h * h * e,
            8 * h * h * e,
            2 * self.params_per_layer() * e,
            (4 * b * s * h + a * b * s * s) * e,
            8 * b * s * h * e,
        ]
    }
}

/// All globals plus every activation.
pub fn transformer_peak_bytes(config: &TransformerGenConfig) -> u64 {
    config.layer_tensor_sizes().iter().sum::<u64>() * config.num_layers as u64
}

pub fn gen_transformer_trace(config: &TransformerGenConfig) -> Result<Trace, ConfigError> {
    config.validate()?;
    let l = config.num_layers as usize;
    let (h, b, s) = (config.hidden_dim, config.batch, config.seq_len);
    let attn_fwd = 8 * b * s * h * h + 4 * b * s * s * h;
    let mlp_fwd = 16 * b * s * h * h;
    let optimizer = OPTIMIZER_FLOPS_PER_PARAM * config.params_per_layer();

    let fwd = |layer: usize, mlp: bool| 2 * layer + mlp as usize;
    let bwd = |layer: usize, mlp: bool| 2 * l + 2 * (l - 1 - layer) + (!mlp) as usize;
    let opt = |layer: usize| 4 * l + layer;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut specs: Vec<(String, u64, usize)> = Vec::with_capacity(5 * l);
    for layer in 0..l {
        specs.push((format!("attn_fwd.{layer}"), attn_fwd, layer));
        specs.push((format!("mlp_fwd.{layer}"), mlp_fwd, layer));
    }
    for layer in (0..l).rev() {
        specs.push((format!("mlp_bwd.{layer}"), 2 * mlp_fwd, layer));
        specs.push((format!("attn_bwd.{layer}"), 2 * attn_fwd, layer));
    }
    for layer in 0..l {
        specs.push((format!("optimizer.{layer}"), optimizer, layer));
    }
    let stages = config.pipeline_stages as usize;
    let kernels = specs
        .into_iter()
        .enumerate()
        .map(|(index, (name, flops, layer))| {
            let jitter: f64 = rng.random_range(0.95..=1.05);
            let base = (flops as f64 / config.compute_rate).ceil();
            KernelRecord {
                index,
                name,
                duration: TimeMicros(((base * jitter).round() as u64).max(1)),
                stage: Some((layer * stages / l) as u32),
                layer: Some(layer as u32),
            }
        })
        .collect();

    let sizes = config.layer_tensor_sizes();
    let mut tensors = Vec::with_capacity(7 * l);
    for layer in 0..l {
        let uses: [(TensorKind, Vec<usize>); 7] = [
            (
                TensorKind::Global,
                vec![fwd(layer, false), bwd(layer, false), opt(layer)],
            ),
            (
                TensorKind::Global,
                vec![fwd(layer, true), bwd(layer, true), opt(layer)],
            ),
            (TensorKind::Global, vec![bwd(layer, false), opt(layer)]),
            (TensorKind::Global, vec![bwd(layer, true), opt(layer)]),
            (TensorKind::Global, vec![opt(layer)]),
            (
                TensorKind::Intermediate,
                vec![fwd(layer, false), bwd(layer, false)],
            ),
            (
                TensorKind::Intermediate,
                vec![fwd(layer, true), bwd(layer, true)],
            ),
        ];
        for (j, (kind, accesses)) in uses.into_iter().enumerate() {
            tensors.push(TensorRecord {
                id: (7 * layer + j) as u32,
                size: ByteSize(sizes[j]),
                kind,
                accesses,
                layer: Some(layer as u32),
            });
        }
    }

    let mut meta = Meta::new();
    meta.insert("generator".into(), "transformer".into());
    meta.insert(
        "config".into(),
        serde_json::to_value(config).expect("config serializes"),
    );
    Ok(Trace {
        meta,
        kernels,
        tensors,
    })
}

/// Random trace with `num_kernels` kernels and `num_tensors` tensors.
/// Roughly three in ten tensors are global. Kernels are grouped four to a
/// layer and a tensor belongs to the layer of its first access.
///
/// # Panics
///
/// If either range contains zero, or if tensors are requested without kernels.
pub fn gen_random_trace(
    seed: u64,
    num_kernels: usize,
    num_tensors: usize,
    size_range: RangeInclusive<u64>,
    duration_range: RangeInclusive<u64>,
) -> Trace {
    assert!(
        *size_range.start() > 0 && *duration_range.start() > 0,
        "ranges must be positive"
    );
    assert!(num_kernels > 0 || num_tensors == 0, "tensors need kernels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = num_kernels.div_ceil(4).max(1);
    let layer_of = |k: usize| (k * layers / num_kernels.max(1)) as u32;
    let kernels = (0..num_kernels)
        .map(|index| KernelRecord {
            index,
            name: format!("k{index}"),
            duration: TimeMicros(rng.random_range(duration_range.clone())),
            stage: None,
            layer: Some(layer_of(index)),
        })
        .collect();
    let tensors = (0..num_tensors)
        .map(|i| {
            let kind = if rng.random_bool(0.3) {
                TensorKind::Global
            } else {
                TensorKind::Intermediate
            };
            let count = rng.random_range(1..=num_kernels.min(5));
            let mut accesses = sample(&mut rng, num_kernels, count).into_vec();
            accesses.sort_unstable();
            TensorRecord {
                id: i as u32,
                size: ByteSize(rng.random_range(size_range.clone())),
                kind,
                layer: Some(layer_of(accesses[0])),
                accesses,
            }
        })
        .collect();
    let mut meta = Meta::new();
    meta.insert("generator".into(), "random".into());
    meta.insert("seed".into(), seed.into());
    Trace {
        meta,
        kernels,
        tensors,
    }
}
