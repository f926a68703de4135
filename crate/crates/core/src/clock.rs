//! CPU-time metering.
//!
//! Two clocks share one interface: the calling thread's CPU clock, and a
//! virtual clock that charges fixed nanosecond costs per metered event. The
//! virtual clock makes every timestamp a pure function of the event counts,
//! so outputs that embed timestamps stay reproducible byte for byte.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nanoseconds of CPU time consumed by the calling thread.
pub fn thread_cpu_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0;
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// Fixed per-event charges of the virtual clock, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VirtualCosts {
    /// One target log-density evaluation.
    pub target: f64,
    /// One target gradient evaluation.
    pub gradient: f64,
    /// One proposal log-density evaluation.
    pub proposal: f64,
    /// One proposal draw, including its normals.
    pub draw: f64,
    /// One test-function evaluation.
    pub test_function: f64,
    /// Bookkeeping per chain step or per weight update.
    pub step: f64,
}

impl Default for VirtualCosts {
    fn default() -> Self {
        VirtualCosts {
            target: 100.0,
            gradient: 100.0,
            proposal: 20.0,
            draw: 30.0,
            test_function: 5.0,
            step: 5.0,
        }
    }
}

impl VirtualCosts {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.target,
            self.gradient,
            self.proposal,
            self.draw,
            self.test_function,
            self.step,
        ];
        if all.iter().all(|c| c.is_finite() && *c >= 0.0) {
            Ok(())
        } else {
            Err(Error::input(
                "virtual clock costs must be finite and non-negative",
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ClockMode {
    #[default]
    ThreadCpu,
    Virtual(VirtualCosts),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Target,
    Gradient,
    Proposal,
    Draw,
    TestFunction,
    Step,
}

/// Elapsed-time meter started at construction.
#[derive(Debug, Clone)]
pub struct Meter {
    mode: ClockMode,
    start: u64,
    virtual_ns: f64,
}

impl Meter {
    pub fn start(mode: ClockMode) -> Self {
        let start = match mode {
            ClockMode::ThreadCpu => thread_cpu_ns(),
            ClockMode::Virtual(_) => 0,
        };
        Meter {
            mode,
            start,
            virtual_ns: 0.0,
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self.mode, ClockMode::Virtual(_))
    }

    /// Charges `count` events to the virtual clock; no-op for the CPU clock.
    #[inline]
    pub fn charge(&mut self, event: Event, count: u64) {
        if let ClockMode::Virtual(c) = &self.mode {
            let unit = match event {
                Event::Target => c.target,
                Event::Gradient => c.gradient,
                Event::Proposal => c.proposal,
                Event::Draw => c.draw,
                Event::TestFunction => c.test_function,
                Event::Step => c.step,
            };
            self.virtual_ns += unit * count as f64;
        }
    }

    /// Nanoseconds elapsed since `start`.
    pub fn elapsed_ns(&self) -> u64 {
        match self.mode {
            ClockMode::ThreadCpu => thread_cpu_ns().saturating_sub(self.start),
            ClockMode::Virtual(_) => self.virtual_ns.round() as u64,
        }
    }
}

/// Per-step timestamps that read the CPU clock only every `stride` steps and
/// interpolate linearly in between; a clock read costs far more than a cheap
/// chain step. Virtual clocks are read at every step.
#[derive(Debug)]
pub struct StepTimer {
    stride: usize,
    stamps: Vec<u64>,
    /// Indices into `stamps` holding measured (not yet interpolated) values.
    anchors: Vec<usize>,
}

impl StepTimer {
    pub fn new(capacity: usize, stride: usize) -> Self {
        StepTimer {
            stride: stride.max(1),
            stamps: Vec::with_capacity(capacity),
            anchors: Vec::new(),
        }
    }

    /// Records the end of the next step.
    #[inline]
    pub fn record(&mut self, meter: &Meter) {
        let k = self.stamps.len();
        if meter.is_virtual() || (k + 1).is_multiple_of(self.stride) {
            self.stamps.push(meter.elapsed_ns());
            self.anchors.push(k);
        } else {
            self.stamps.push(0);
        }
    }

    /// Measures the last step if needed and fills interpolated entries.
    pub fn finish(mut self, meter: &Meter) -> Vec<u64> {
        let n = self.stamps.len();
        if n == 0 {
            return self.stamps;
        }
        if self.anchors.last() != Some(&(n - 1)) {
            self.stamps[n - 1] = meter.elapsed_ns();
            self.anchors.push(n - 1);
        }
        let mut prev: Option<usize> = None;
        for &a in &self.anchors {
            let (lo_idx, lo_val) = match prev {
                Some(p) => (p as f64, self.stamps[p] as f64),
                None => (-1.0, 0.0),
            };
            let hi_val = self.stamps[a] as f64;
            let start = prev.map_or(0, |p| p + 1);
            for k in start..a {
                let t = (k as f64 - lo_idx) / (a as f64 - lo_idx);
                self.stamps[k] = (lo_val + t * (hi_val - lo_val)) as u64;
            }
            prev = Some(a);
        }
        // Guard against a clock that briefly runs backwards.
        for k in 1..n {
            if self.stamps[k] < self.stamps[k - 1] {
                self.stamps[k] = self.stamps[k - 1];
            }
        }
        self.stamps
    }
}
