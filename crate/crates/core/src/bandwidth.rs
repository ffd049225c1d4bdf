//! Serial migration channels.
//!
//! A channel moves one tensor at a time in one direction at a fixed rate.
//! The planner uses it as a reservation calendar to estimate when transfers
//! can happen; the simulator uses it to record the transfers it executed.
//!
//! A channel can be periodic: the planner plans one iteration of a workload
//! that repeats forever, so a reservation at `t` also blocks `t + j * period`
//! for every integer `j`. Reservations that spill past the end of the
//! iteration then collide with the start of the next one.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::TensorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// GPU to SSD or host.
    Offload,
    /// SSD or host to GPU.
    Prefetch,
}

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("channel {name}: rate must be a positive finite number of bytes per microsecond, got {rate}")]
    BadRate { name: String, rate: f64 },
    #[error("channel {0}: no free interval satisfies the request")]
    Infeasible(String),
    #[error("channel {name}: reservation [{start}, {end}) overlaps an existing one")]
    Overlap { name: String, start: u64, end: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Reservation {
    pub start: u64,
    pub end: u64,
    pub tensor_id: TensorId,
    pub channel: String,
}

impl Reservation {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

/// `ceil(bytes / rate)` in whole microseconds.
pub fn transfer_duration(rate: f64, bytes: u64) -> Result<u64, ChannelError> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(ChannelError::BadRate {
            name: String::new(),
            rate,
        });
    }
    Ok(duration_unchecked(rate, bytes))
}

fn duration_unchecked(rate: f64, bytes: u64) -> u64 {
    if bytes == 0 {
        return 0;
    }
    // integral rates get exact integer division
    if rate.fract() == 0.0 && rate <= (1u64 << 53) as f64 {
        return bytes.div_ceil(rate as u64);
    }
    let q = bytes as f64 / rate;
    (q.ceil() as u64).max(1)
}

#[derive(Clone, Debug)]
pub struct BandwidthChannel {
    pub name: String,
    pub direction: Direction,
    rate: f64,
    period: Option<u64>,
    /// Sorted by start, pairwise disjoint (modulo `period` when set).
    reservations: Vec<Reservation>,
    /// Periodic channels only: reservations folded into `[0, period)`.
    folded: Vec<(u64, u64)>,
}

impl BandwidthChannel {
    pub fn new(
        name: impl Into<String>,
        direction: Direction,
        rate: f64,
    ) -> Result<Self, ChannelError> {
        let name = name.into();
        if !(rate.is_finite() && rate > 0.0) {
            return Err(ChannelError::BadRate { name, rate });
        }
        Ok(BandwidthChannel {
            name,
            direction,
            rate,
            period: None,
            reservations: Vec::new(),
            folded: Vec::new(),
        })
    }

    /// Makes every reservation repeat with the given period. Must be called
    /// before anything is reserved.
    pub fn with_period(mut self, period: u64) -> Self {
        assert!(
            self.reservations.is_empty(),
            "period must be set on an empty channel"
        );
        self.period = (period > 0).then_some(period);
        self
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn period(&self) -> Option<u64> {
        self.period
    }

    pub fn reservations(&self) -> &[Reservation] {
        &self.reservations
    }

    pub fn transfer_duration(&self, bytes: u64) -> u64 {
        duration_unchecked(self.rate, bytes)
    }

    /// Busy intervals with `end > from`, in increasing order.
    fn busy_forward(&self, from: u64) -> Box<dyn Iterator<Item = (u64, u64)> + '_> {
        match self.period {
            None => {
                let i = self.reservations.partition_point(|r| r.end <= from);
                Box::new(self.reservations[i..].iter().map(|r| (r.start, r.end)))
            }
            Some(_) if self.folded.is_empty() => Box::new(std::iter::empty()),
            Some(p) => {
                let cycle = from / p;
                let pos = from % p;
                let i = self.folded.partition_point(|&(_, e)| e <= pos);
                let first = self.folded[i..]
                    .iter()
                    .map(move |&(a, b)| (a + cycle * p, b + cycle * p));
                let rest = (cycle + 1..).flat_map(move |c| {
                    self.folded
                        .iter()
                        .map(move |&(a, b)| (a + c * p, b + c * p))
                });
                Box::new(first.chain(rest))
            }
        }
    }

    /// Busy intervals with `start < to`, in decreasing order, never below 0.
    fn busy_backward(&self, to: u64) -> Box<dyn Iterator<Item = (u64, u64)> + '_> {
        match self.period {
            None => {
                let i = self.reservations.partition_point(|r| r.start < to);
                Box::new(
                    self.reservations[..i]
                        .iter()
                        .rev()
                        .map(|r| (r.start, r.end)),
                )
            }
            Some(_) if self.folded.is_empty() => Box::new(std::iter::empty()),
            Some(p) => {
                let cycle = to / p;
                let pos = to % p;
                let i = self.folded.partition_point(|&(a, _)| a < pos);
                let first = self.folded[..i]
                    .iter()
                    .rev()
                    .map(move |&(a, b)| (a + cycle * p, b + cycle * p));
                let rest = (0..cycle).rev().flat_map(move |c| {
                    self.folded
                        .iter()
                        .rev()
                        .map(move |&(a, b)| (a + c * p, b + c * p))
                });
                Box::new(first.chain(rest))
            }
        }
    }

    /// Earliest `[start, start + duration)` with `start >= ready` that is free.
    pub fn find_earliest(&self, ready: u64, bytes: u64) -> Option<(u64, u64)> {
        let d = self.transfer_duration(bytes);
        if let Some(p) = self.period {
            if d > p {
                return None;
            }
        }
        let mut s = ready;
        let give_up = self.period.map(|p| ready + 2 * p);
        for (a, b) in self.busy_forward(ready) {
            if s + d <= a {
                return Some((s, s + d));
            }
            s = s.max(b);
            if give_up.is_some_and(|g| s > g) {
                return None;
            }
        }
        Some((s, s + d))
    }

    /// Latest free `[end - duration, end)` with `end <= deadline` and
    /// `end - duration >= not_before`.
    pub fn find_latest(&self, deadline: u64, not_before: u64, bytes: u64) -> Option<(u64, u64)> {
        let d = self.transfer_duration(bytes);
        if let Some(p) = self.period {
            if d > p {
                return None;
            }
        }
        let mut e = deadline;
        if e < not_before + d {
            return None;
        }
        for (a, b) in self.busy_backward(deadline) {
            if b + d <= e {
                break;
            }
            e = e.min(a);
            if e < not_before + d {
                return None;
            }
        }
        Some((e - d, e))
    }

    /// Inserts a reservation, rejecting overlaps.
    pub fn insert(
        &mut self,
        start: u64,
        end: u64,
        tensor_id: TensorId,
    ) -> Result<Reservation, ChannelError> {
        let r = Reservation {
            start,
            end,
            tensor_id,
            channel: self.name.clone(),
        };
        if start >= end {
            return Ok(r);
        }
        if self.overlaps(start, end) {
            return Err(ChannelError::Overlap {
                name: self.name.clone(),
                start,
                end,
            });
        }
        let i = self.reservations.partition_point(|x| x.start < start);
        self.reservations.insert(i, r.clone());
        if let Some(p) = self.period {
            for piece in fold(start, end, p) {
                let j = self.folded.partition_point(|x| x.0 < piece.0);
                self.folded.insert(j, piece);
            }
        }
        Ok(r)
    }

    fn overlaps(&self, start: u64, end: u64) -> bool {
        match self.period {
            None => self
                .busy_forward(start)
                .next()
                .is_some_and(|(a, _)| a < end),
            Some(p) => {
                if end - start > p {
                    return true;
                }
                fold(start, end, p).into_iter().any(|(s, e)| {
                    let i = self.folded.partition_point(|x| x.1 <= s);
                    self.folded.get(i).is_some_and(|x| x.0 < e)
                })
            }
        }
    }

    pub fn reserve_earliest(
        &mut self,
        ready: u64,
        bytes: u64,
        tensor_id: TensorId,
    ) -> Result<Reservation, ChannelError> {
        let (s, e) = self
            .find_earliest(ready, bytes)
            .ok_or_else(|| ChannelError::Infeasible(self.name.clone()))?;
        self.insert(s, e, tensor_id)
    }

    pub fn reserve_latest(
        &mut self,
        deadline: u64,
        not_before: u64,
        bytes: u64,
        tensor_id: TensorId,
    ) -> Result<Reservation, ChannelError> {
        let (s, e) = self
            .find_latest(deadline, not_before, bytes)
            .ok_or_else(|| ChannelError::Infeasible(self.name.clone()))?;
        self.insert(s, e, tensor_id)
    }

    /// Fraction of `[window_start, window_end)` covered by reservations.
    pub fn utilization(&self, window_start: u64, window_end: u64) -> f64 {
        if window_end <= window_start {
            return 0.0;
        }
        let mut busy = 0u64;
        for (a, b) in self.busy_forward(window_start) {
            if a >= window_end {
                break;
            }
            busy += b.min(window_end) - a.max(window_start);
        }
        busy as f64 / (window_end - window_start) as f64
    }

    pub fn reserved_time(&self) -> u64 {
        self.reservations.iter().map(Reservation::duration).sum()
    }
}

/// `[start, end)` projected into `[0, period)`, split at the wrap point.
fn fold(start: u64, end: u64, period: u64) -> Vec<(u64, u64)> {
    let d = end - start;
    let s = start % period;
    if s + d <= period {
        vec![(s, s + d)]
    } else {
        vec![(s, period), (0, s + d - period)]
    }
}

pub fn channel_utilization(channel: &BandwidthChannel, window_start: u64, window_end: u64) -> f64 {
    channel.utilization(window_start, window_end)
}

/// Rates of one GPU-to-device link, as written in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub offload_rate_bytes_per_us: f64,
    pub prefetch_rate_bytes_per_us: f64,
}

impl ChannelSpec {
    pub fn symmetric(name: impl Into<String>, rate: f64) -> Self {
        ChannelSpec {
            name: name.into(),
            offload_rate_bytes_per_us: rate,
            prefetch_rate_bytes_per_us: rate,
        }
    }
}

/// Where an offloaded tensor lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Device {
    #[serde(rename = "GPU")]
    Gpu,
    #[serde(rename = "CPU")]
    Host,
    #[serde(rename = "SSD")]
    Ssd,
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Device::Gpu => "GPU",
            Device::Host => "CPU",
            Device::Ssd => "SSD",
        })
    }
}

/// The SSD link and the host-memory link of one GPU. Either may be absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChannelConfig {
    pub ssd: Option<ChannelSpec>,
    pub host: Option<ChannelSpec>,
}

/// Aggregate bandwidth of a four-drive SSD array, bytes per microsecond.
pub const DEFAULT_SSD_RATE: f64 = 16_000.0;

impl ChannelConfig {
    pub fn ssd_only(rate: f64) -> Self {
        ChannelConfig {
            ssd: Some(ChannelSpec::symmetric("ssd", rate)),
            host: None,
        }
    }

    /// Every rate positive and finite.
    pub fn validate(&self) -> Result<(), ChannelError> {
        for spec in [&self.ssd, &self.host].into_iter().flatten() {
            for rate in [
                spec.offload_rate_bytes_per_us,
                spec.prefetch_rate_bytes_per_us,
            ] {
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(ChannelError::BadRate {
                        name: spec.name.clone(),
                        rate,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn spec(&self, device: Device) -> Option<&ChannelSpec> {
        match device {
            Device::Ssd => self.ssd.as_ref(),
            Device::Host => self.host.as_ref(),
            Device::Gpu => None,
        }
    }

    /// Builds the config from named specs; names must be `ssd` or `host`.
    pub fn from_specs(specs: &[ChannelSpec]) -> Result<Self, String> {
        let mut cfg = ChannelConfig::default();
        for s in specs {
            let slot = match s.name.as_str() {
                "ssd" => &mut cfg.ssd,
                "host" => &mut cfg.host,
                other => {
                    return Err(format!(
                        "unknown channel {other:?}; expected \"ssd\" or \"host\""
                    ))
                }
            };
            if slot.is_some() {
                return Err(format!("channel {:?} defined twice", s.name));
            }
            *slot = Some(s.clone());
        }
        Ok(cfg)
    }

    /// A channel for one direction of one device's link.
    pub fn channel(&self, device: Device, direction: Direction) -> Option<BandwidthChannel> {
        let spec = self.spec(device)?;
        let rate = match direction {
            Direction::Offload => spec.offload_rate_bytes_per_us,
            Direction::Prefetch => spec.prefetch_rate_bytes_per_us,
        };
        let name = format!(
            "{}-{}",
            match device {
                Device::Ssd => "ssd",
                Device::Host => "host",
                Device::Gpu => "gpu",
            },
            match direction {
                Direction::Offload => "offload",
                Direction::Prefetch => "prefetch",
            }
        );
        BandwidthChannel::new(name, direction, rate).ok()
    }
}
