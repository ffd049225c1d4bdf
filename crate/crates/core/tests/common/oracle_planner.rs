//! Exhaustive re-derivation of every greedy planning round.
//!
//! Works one microsecond at a time, so only usable on small traces.

use offload_core::planner::CommittedMigration;
use offload_core::{ChannelConfig, Device, MigrationPlan, TensorKind, Trace};

/// A period as `(tensor, first idle kernel)` plus its idle kernels with
/// their iteration offset.
#[derive(Clone, Debug)]
pub struct Gap {
    pub tensor: u32,
    pub first: usize,
    pub size: u64,
    pub kernels: Vec<(usize, u64)>,
    /// Stall-free end of the last use and start of the next one.
    pub ready: u64,
    pub need: u64,
}

pub fn gaps(trace: &Trace) -> Vec<Gap> {
    let n = trace.num_kernels();
    let mut starts = vec![0u64; n + 1];
    for k in 0..n {
        starts[k + 1] = starts[k] + trace.kernels[k].duration.0;
    }
    let t_iter = starts[n];
    let mut out = Vec::new();
    for t in &trace.tensors {
        for w in t.accesses.windows(2) {
            if w[1] - w[0] > 1 {
                out.push(Gap {
                    tensor: t.id,
                    first: w[0] + 1,
                    size: t.size.0,
                    kernels: (w[0] + 1..w[1]).map(|k| (k, 0)).collect(),
                    ready: starts[w[0] + 1],
                    need: starts[w[1]],
                });
            }
        }
        if t.kind == TensorKind::Global {
            let (first, last) = (t.accesses[0], *t.accesses.last().unwrap());
            let mut ks: Vec<(usize, u64)> = (last + 1..n).map(|k| (k, 0)).collect();
            ks.extend((0..first).map(|k| (k, 1)));
            if !ks.is_empty() {
                out.push(Gap {
                    tensor: t.id,
                    first: (last + 1) % n,
                    size: t.size.0,
                    kernels: ks,
                    ready: starts[last + 1],
                    need: t_iter + starts[first],
                });
            }
        }
    }
    out
}

fn dur(rate: f64, bytes: u64) -> u64 {
    (bytes as f64 / rate).ceil().max(1.0) as u64
}

/// Busy intervals of one periodic channel.
#[derive(Clone, Default)]
struct Calendar {
    busy: Vec<(u64, u64)>,
}

impl Calendar {
    fn free(&self, s: u64, e: u64, period: u64) -> bool {
        self.busy.iter().all(|&(a, b)| {
            (-4i64..=4).all(|j| {
                let (a, b) = (a as i64 + j * period as i64, b as i64 + j * period as i64);
                b <= s as i64 || a >= e as i64
            })
        })
    }

    fn earliest(&self, ready: u64, d: u64, period: u64) -> Option<(u64, u64)> {
        if d > period {
            return None;
        }
        (ready..ready + 2 * period + 1)
            .find(|&s| self.free(s, s + d, period))
            .map(|s| (s, s + d))
    }

    fn latest(&self, deadline: u64, not_before: u64, d: u64, period: u64) -> Option<(u64, u64)> {
        if deadline < d {
            return None;
        }
        (not_before..=deadline - d)
            .rev()
            .find(|&s| self.free(s, s + d, period))
            .map(|s| (s, s + d))
    }
}

type Window = (Device, (u64, u64), (u64, u64));

struct Links {
    rate: [Option<(f64, f64)>; 2],
    cal: [[Calendar; 2]; 2],
    host: Vec<(u64, u64, u64)>,
    host_cap: u64,
    period: u64,
}

impl Links {
    fn host_peak(&self, s: u64, e: u64) -> u64 {
        let p = self.period as i64;
        (s..e)
            .map(|t| {
                self.host
                    .iter()
                    .filter(|&&(a, b, _)| {
                        (-4i64..=4)
                            .any(|j| a as i64 + j * p <= t as i64 && (t as i64) < b as i64 + j * p)
                    })
                    .map(|&(_, _, bytes)| bytes)
                    .sum::<u64>()
            })
            .max()
            .unwrap_or(0)
    }

    /// `(device, offload window, prefetch window)`.
    fn window(&self, g: &Gap) -> Option<Window> {
        for (di, device) in [(0, Device::Ssd), (1, Device::Host)] {
            let Some((ro, rp)) = self.rate[di] else {
                continue;
            };
            let off = self.cal[di][0].earliest(g.ready, dur(ro, g.size), self.period);
            let Some(off) = off else { continue };
            let pre = self.cal[di][1].latest(g.need, off.1, dur(rp, g.size), self.period);
            let Some(pre) = pre else { continue };
            if off.1 >= pre.0 {
                continue;
            }
            if device == Device::Host && self.host_peak(off.0, pre.1) + g.size > self.host_cap {
                continue;
            }
            return Some((device, off, pre));
        }
        None
    }
}

/// Checks every committed round of `plan` against an exhaustive search.
/// Returns a description of the first disagreement.
pub fn check_rounds(
    trace: &Trace,
    capacity: u64,
    channels: &ChannelConfig,
    host_cap: Option<u64>,
    plan: &MigrationPlan,
) -> Result<(), String> {
    let n = trace.num_kernels();
    let durs: Vec<u64> = trace.kernels.iter().map(|k| k.duration.0).collect();
    let mut starts = vec![0u64; n];
    for k in 1..n {
        starts[k] = starts[k - 1] + durs[k - 1];
    }
    let period: u64 = durs.iter().sum();
    let mut m: Vec<u64> = (0..n)
        .map(|k| {
            trace
                .tensors
                .iter()
                .filter(|t| t.is_resident_at(k))
                .map(|t| t.size.0)
                .sum()
        })
        .collect();
    let spec = |s: &Option<offload_core::ChannelSpec>| {
        s.as_ref()
            .map(|s| (s.offload_rate_bytes_per_us, s.prefetch_rate_bytes_per_us))
    };
    let mut links = Links {
        rate: [spec(&channels.ssd), spec(&channels.host)],
        cal: Default::default(),
        host: Vec::new(),
        host_cap: host_cap.unwrap_or(u64::MAX),
        period,
    };
    let mut open = gaps(trace);

    let covered = |g: &Gap, off_end: u64, pre_start: u64| -> Vec<usize> {
        g.kernels
            .iter()
            .filter(|&&(k, it)| {
                let s = starts[k] + it * period;
                s >= off_end && s + durs[k] <= pre_start
            })
            .map(|&(k, _)| k)
            .collect()
    };

    let mut rounds = plan.committed.iter();
    loop {
        let pressured = m.iter().any(|&x| x > capacity);
        // best (benefit, cost) over every open gap
        let mut best: Option<(u128, u64, u32, usize)> = None;
        if pressured {
            for g in &open {
                let Some((_, off, pre)) = links.window(g) else {
                    continue;
                };
                let b: u128 = covered(g, off.1, pre.0)
                    .into_iter()
                    .filter(|&k| m[k] > capacity)
                    .map(|k| g.size as u128 * durs[k] as u128)
                    .sum();
                if b == 0 {
                    continue;
                }
                let c = (off.1 - off.0) + (pre.1 - pre.0);
                let better = match best {
                    None => true,
                    Some((bb, bc, bt, bf)) => {
                        let (l, r) = (b * bc as u128, bb * c as u128);
                        l > r || (l == r && (g.tensor, g.first) < (bt, bf))
                    }
                };
                if better {
                    best = Some((b, c, g.tensor, g.first));
                }
            }
        }
        let round: Option<&CommittedMigration> = rounds.next();
        let (b, c, tensor, first) = match (best, round) {
            (None, None) => return Ok(()),
            (None, Some(r)) => {
                return Err(format!(
                    "planner committed tensor {} but nothing qualifies",
                    r.period.tensor_id
                ))
            }
            (Some(b), None) => {
                return Err(format!(
                    "planner stopped early; tensor {} still qualifies",
                    b.2
                ))
            }
            (Some(b), Some(_)) => b,
        };
        let r = round.unwrap();
        if (r.period.tensor_id, r.period.start_kernel) != (tensor, first) {
            return Err(format!(
                "round picked ({}, {}) but the best is ({tensor}, {first}) with ratio {b}/{c}",
                r.period.tensor_id, r.period.start_kernel
            ));
        }
        if r.benefit.value != b || r.window.cost() != c {
            return Err(format!(
                "benefit/cost mismatch for tensor {tensor}: {}/{} vs {b}/{c}",
                r.benefit.value,
                r.window.cost()
            ));
        }
        // commit on the oracle side
        let gi = open
            .iter()
            .position(|g| (g.tensor, g.first) == (tensor, first))
            .unwrap();
        let g = open.remove(gi);
        let (device, off, pre) = links.window(&g).unwrap();
        if device != r.window.destination
            || (off.0, off.1) != (r.window.offload.start, r.window.offload.end)
            || (pre.0, pre.1) != (r.window.prefetch.start, r.window.prefetch.end)
        {
            return Err(format!("window mismatch for tensor {tensor}"));
        }
        let di = if device == Device::Ssd { 0 } else { 1 };
        links.cal[di][0].busy.push(off);
        links.cal[di][1].busy.push(pre);
        if device == Device::Host {
            links.host.push((off.0, pre.1, g.size));
        }
        for k in covered(&g, off.1, pre.0) {
            m[k] -= g.size;
        }
    }
}
