//! A simulator that advances one microsecond at a time and recomputes all
//! derived state (resident bytes, relief, eligibility) from scratch on every
//! tick. Same runtime rules as the library engine, none of its bookkeeping.

use offload_core::{ChannelConfig, Device, Direction, PlanEntry, TensorKind, Trace};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Loc {
    Nowhere,
    Gpu,
    At(Device),
}

#[derive(Clone, Copy, Debug)]
struct Move {
    dir: Direction,
    device: Device,
    end: u64,
}

#[derive(Clone, Debug)]
struct Req {
    tensor: usize,
    dir: Direction,
    target: Device,
    urgent: bool,
    seq: u64,
}

#[derive(Debug, PartialEq, Eq)]
pub struct TickResult {
    pub total_time: u64,
    pub starts: Vec<u64>,
    pub emergency_offloads: u64,
    pub peak: u64,
}

pub enum TickPolicy<'a> {
    Plan(&'a [PlanEntry]),
    OnDemand,
}

struct Sim<'a> {
    trace: &'a Trace,
    cap: u64,
    order: Vec<usize>,
    loc: Vec<Loc>,
    mv: Vec<Option<Move>>,
    busy: Vec<(Device, Direction, f64, Option<usize>)>,
    queue: Vec<Req>,
    seq: u64,
}

impl<'a> Sim<'a> {
    fn t(&self, i: usize) -> &offload_core::TensorRecord {
        &self.trace.tensors[self.order[i]]
    }

    fn resident(&self) -> u64 {
        (0..self.order.len())
            .filter(|&i| {
                self.loc[i] == Loc::Gpu
                    || matches!(self.mv[i], Some(m) if m.dir == Direction::Prefetch)
            })
            .map(|i| self.t(i).size.0)
            .sum()
    }

    fn needs(&self, k: usize, i: usize) -> bool {
        self.t(i).accesses.contains(&k)
    }

    fn has_chan(&self, d: Device) -> bool {
        self.busy.iter().any(|c| c.0 == d)
    }

    fn spill_to(&self) -> Device {
        if self.has_chan(Device::Ssd) {
            Device::Ssd
        } else {
            Device::Host
        }
    }

    fn push(&mut self, tensor: usize, dir: Direction, target: Device, urgent: bool) {
        self.seq += 1;
        self.queue.push(Req {
            tensor,
            dir,
            target,
            urgent,
            seq: self.seq,
        });
    }

    fn spill_until_fits(&mut self) {
        let mut idle: Vec<usize> = (0..self.order.len())
            .filter(|&i| self.loc[i] == Loc::Gpu && self.mv[i].is_none())
            .collect();
        idle.sort_by_key(|&i| (std::cmp::Reverse(self.t(i).accesses[0]), i));
        let dev = self.spill_to();
        for i in idle {
            if self.resident() <= self.cap {
                break;
            }
            self.loc[i] = Loc::At(dev);
        }
    }
}

fn duration(rate: f64, bytes: u64) -> u64 {
    (bytes as f64 / rate).ceil().max(1.0) as u64
}

pub fn tick_simulate(
    trace: &Trace,
    policy: TickPolicy,
    cap: u64,
    channels: &ChannelConfig,
) -> Result<TickResult, String> {
    let n = trace.num_kernels();
    let durs: Vec<u64> = trace.kernels.iter().map(|k| k.duration.0).collect();
    let mut plan_start = vec![0u64; n];
    for k in 1..n {
        plan_start[k] = plan_start[k - 1] + durs[k - 1];
    }
    let period: u64 = durs.iter().sum();
    let mut order: Vec<usize> = (0..trace.tensors.len()).collect();
    order.sort_by_key(|&i| trace.tensors[i].id);
    let m = order.len();
    let mut busy = Vec::new();
    for (d, s) in [(Device::Ssd, &channels.ssd), (Device::Host, &channels.host)] {
        if let Some(s) = s {
            busy.push((d, Direction::Offload, s.offload_rate_bytes_per_us, None));
            busy.push((d, Direction::Prefetch, s.prefetch_rate_bytes_per_us, None));
        }
    }
    let mut sim = Sim {
        trace,
        cap,
        loc: order
            .iter()
            .map(|&i| {
                if trace.tensors[i].kind == TensorKind::Global {
                    Loc::Gpu
                } else {
                    Loc::Nowhere
                }
            })
            .collect(),
        order,
        mv: vec![None; m],
        busy,
        queue: Vec::new(),
        seq: 0,
    };
    let idx = |sim: &Sim, id: u32| (0..m).find(|&i| sim.t(i).id == id).unwrap();

    // (anchor kernel or None for time zero, offset, tensor, direction, target)
    let mut triggers: Vec<(Option<usize>, u64, usize, Direction, Device)> = Vec::new();
    match policy {
        TickPolicy::OnDemand => {
            if sim.resident() > cap {
                sim.spill_until_fits();
            }
        }
        TickPolicy::Plan(plan) => {
            let mut done = vec![false; m];
            for p in plan.iter().filter(|e| e.action == Direction::Prefetch) {
                let i = idx(&sim, p.tensor_id);
                if sim.t(i).kind != TensorKind::Global || period == 0 || done[i] {
                    continue;
                }
                let o = plan
                    .iter()
                    .filter(|e| {
                        e.tensor_id == p.tensor_id
                            && e.action == Direction::Offload
                            && e.trigger_time <= p.trigger_time
                    })
                    .max_by_key(|e| e.trigger_time);
                let Some(o) = o else { continue };
                let c = |sim: &Sim, d: Device, dir: Direction| {
                    sim.busy
                        .iter()
                        .position(|b| b.0 == d && b.1 == dir)
                        .unwrap()
                };
                if o.trigger_time < period && period < o.deadline {
                    let ci = c(&sim, o.target, Direction::Offload);
                    if sim.busy[ci].3.is_none() {
                        sim.busy[ci].3 = Some(i);
                        sim.mv[i] = Some(Move {
                            dir: Direction::Offload,
                            device: o.target,
                            end: o.deadline - period,
                        });
                        done[i] = true;
                    }
                } else if o.deadline <= period && period <= p.trigger_time {
                    sim.loc[i] = Loc::At(o.target);
                    done[i] = true;
                } else if p.trigger_time < period && period < p.deadline {
                    let ci = c(&sim, o.target, Direction::Prefetch);
                    if sim.busy[ci].3.is_none() {
                        sim.loc[i] = Loc::At(o.target);
                        sim.busy[ci].3 = Some(i);
                        sim.mv[i] = Some(Move {
                            dir: Direction::Prefetch,
                            device: o.target,
                            end: p.deadline - period,
                        });
                        done[i] = true;
                    }
                }
            }
            for e in plan {
                let i = idx(&sim, e.tensor_id);
                let r = e.trigger_time % period;
                let anchor = (0..n).find(|&k| plan_start[k] < r && r <= plan_start[k] + durs[k]);
                let offset = anchor.map_or(0, |k| r - plan_start[k]);
                triggers.push((anchor, offset, i, e.action, e.target));
            }
            triggers.sort_by_key(|&(_, _, i, d, _)| (sim.t(i).id, d == Direction::Prefetch));
            if sim.resident() > cap {
                sim.spill_until_fits();
            }
        }
    }

    let mut peak = sim.resident();
    let mut starts: Vec<u64> = Vec::new();
    let mut running: Option<(usize, u64)> = None;
    let mut next = 0usize;
    let mut emergency = 0u64;
    let horizon = 10 * (period + 1) * (m as u64 + 1) * 1_000;
    let mut now = 0u64;
    loop {
        // 1. transfer completions
        for i in 0..m {
            if let Some(mv) = sim.mv[i] {
                if mv.end == now {
                    sim.mv[i] = None;
                    sim.loc[i] = if mv.dir == Direction::Offload {
                        Loc::At(mv.device)
                    } else {
                        Loc::Gpu
                    };
                    for c in sim.busy.iter_mut() {
                        if c.3 == Some(i) {
                            c.3 = None;
                        }
                    }
                }
            }
        }
        // 2. kernel completion
        if let Some((k, end)) = running {
            if end == now {
                running = None;
                next = k + 1;
                for i in 0..m {
                    let t = sim.t(i);
                    if t.kind == TensorKind::Intermediate && *t.accesses.last().unwrap() == k {
                        sim.loc[i] = Loc::Nowhere;
                    }
                }
            }
        }
        // 3. gate
        let mut blocked = None;
        if running.is_none() && next < n {
            let k = next;
            let mut q = std::mem::take(&mut sim.queue);
            q.retain(|r| !(r.dir == Direction::Offload && sim.needs(k, r.tensor)));
            sim.queue = q;
            let needed: Vec<usize> = (0..m).filter(|&i| sim.needs(k, i)).collect();
            let touch: u64 = needed
                .iter()
                .filter(|&&i| sim.loc[i] == Loc::Nowhere)
                .map(|&i| sim.t(i).size.0)
                .sum();
            let ready = needed
                .iter()
                .all(|&i| matches!(sim.loc[i], Loc::Gpu | Loc::Nowhere) && sim.mv[i].is_none());
            if ready && sim.resident() + touch <= cap {
                for &i in &needed {
                    sim.loc[i] = Loc::Gpu;
                }
                starts.push(now);
                running = Some((k, now + durs[k]));
            } else {
                blocked = Some(k);
                let mut off_needed = 0;
                for &i in &needed {
                    if let (Loc::At(d), None) = (sim.loc[i], sim.mv[i]) {
                        off_needed += sim.t(i).size.0;
                        if let Some(r) = sim
                            .queue
                            .iter_mut()
                            .find(|r| r.tensor == i && r.dir == Direction::Prefetch)
                        {
                            r.urgent = true;
                        } else {
                            sim.push(i, Direction::Prefetch, d, true);
                        }
                    }
                }
                let demand = sim.resident() + off_needed + touch;
                let mut relief = 0;
                for i in 0..m {
                    if needed.contains(&i) || sim.loc[i] != Loc::Gpu {
                        continue;
                    }
                    if matches!(sim.mv[i], Some(mv) if mv.dir == Direction::Offload) {
                        relief += sim.t(i).size.0;
                    } else if let Some(r) = sim
                        .queue
                        .iter_mut()
                        .find(|r| r.tensor == i && r.dir == Direction::Offload)
                    {
                        r.urgent = true;
                        relief += sim.t(i).size.0;
                    }
                }
                if demand > relief + cap {
                    let mut excess = demand - relief - cap;
                    let next_use = |sim: &Sim, i: usize| {
                        let a = &sim.t(i).accesses;
                        a.iter().copied().find(|&x| x >= k).unwrap_or(n + a[0])
                    };
                    let mut victims: Vec<usize> = (0..m)
                        .filter(|&i| {
                            !needed.contains(&i) && sim.loc[i] == Loc::Gpu && sim.mv[i].is_none()
                        })
                        .filter(|&i| {
                            !sim.queue
                                .iter()
                                .any(|r| r.tensor == i && r.dir == Direction::Offload)
                        })
                        .collect();
                    victims.sort_by_key(|&i| (std::cmp::Reverse(next_use(&sim, i)), i));
                    for i in victims {
                        if excess == 0 {
                            break;
                        }
                        let d = sim.spill_to();
                        sim.push(i, Direction::Offload, d, true);
                        emergency += 1;
                        excess = excess.saturating_sub(sim.t(i).size.0);
                    }
                }
            }
        }
        peak = peak.max(sim.resident());
        // 4. triggers
        for &(anchor, offset, i, dir, target) in &triggers {
            let at = match anchor {
                None => Some(0),
                Some(k) => starts.get(k).map(|s| s + offset),
            };
            if at == Some(now) {
                if dir == Direction::Prefetch {
                    let src = match sim.loc[i] {
                        Loc::At(d) => d,
                        _ => target,
                    };
                    sim.push(i, dir, src, false);
                } else {
                    sim.push(i, dir, target, false);
                }
            }
        }
        // 5. dispatch
        let mut q = std::mem::take(&mut sim.queue);
        q.sort_by_key(|r| (!r.urgent, r.seq));
        let running_k = running.map(|(k, _)| k);
        let mut keep = Vec::new();
        for r in q {
            let i = r.tensor;
            let size = sim.t(i).size.0;
            enum S {
                Drop,
                Wait,
                Go(Device, Direction),
            }
            let s = match r.dir {
                Direction::Offload => match (sim.loc[i], sim.mv[i]) {
                    (Loc::Gpu, Some(mv)) if mv.dir == Direction::Offload => S::Drop,
                    (Loc::Gpu, Some(_)) => S::Wait,
                    (Loc::Gpu, None) if blocked.is_some_and(|k| sim.needs(k, i)) => S::Drop,
                    (Loc::Gpu, None) if running_k.is_some_and(|k| sim.needs(k, i)) => S::Wait,
                    (Loc::Gpu, None) => S::Go(r.target, Direction::Offload),
                    _ => S::Drop,
                },
                Direction::Prefetch => match (sim.loc[i], sim.mv[i]) {
                    (Loc::Nowhere, _) => S::Drop,
                    (Loc::Gpu, Some(_)) => S::Wait,
                    (Loc::Gpu, None) => S::Drop,
                    (Loc::At(_), Some(_)) => S::Drop,
                    (Loc::At(_), None) if blocked.is_some_and(|k| !sim.needs(k, i)) => S::Wait,
                    (Loc::At(_), None) if sim.resident() + size > cap => S::Wait,
                    (Loc::At(d), None) => S::Go(d, Direction::Prefetch),
                },
            };
            match s {
                S::Drop => {}
                S::Wait => keep.push(r),
                S::Go(d, dir) => {
                    let ci = sim
                        .busy
                        .iter()
                        .position(|c| c.0 == d && c.1 == dir)
                        .ok_or("missing channel")?;
                    if sim.busy[ci].3.is_some() {
                        keep.push(r);
                    } else {
                        sim.busy[ci].3 = Some(i);
                        sim.mv[i] = Some(Move {
                            dir,
                            device: d,
                            end: now + duration(sim.busy[ci].2, size),
                        });
                    }
                }
            }
        }
        keep.sort_by_key(|r| r.seq);
        sim.queue = keep;
        peak = peak.max(sim.resident());

        if next == n && running.is_none() {
            break;
        }
        now += 1;
        if now > horizon {
            return Err("no progress".into());
        }
    }
    let total = starts.last().map_or(0, |&s| s + durs[n - 1]);
    Ok(TickResult {
        total_time: total,
        starts,
        emergency_offloads: emergency,
        peak,
    })
}
