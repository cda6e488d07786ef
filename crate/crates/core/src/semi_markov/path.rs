use std::io::{self, Write};

use serde::{Deserialize, Serialize};

/// Current regime and time elapsed since the last regime jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeState {
    pub theta: usize,
    pub age: f64,
}

impl RegimeState {
    pub fn new(theta: usize, age: f64) -> Self {
        Self { theta, age }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeEvent {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    /// Age of the regime being left, i.e. `Y(t−)`.
    pub age_before: f64,
}

/// A regime trajectory on `[0, horizon]`, stored as its jump times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePath {
    origin: RegimeState,
    horizon: f64,
    events: Vec<RegimeEvent>,
}

impl RegimePath {
    pub(crate) fn new(origin: RegimeState, horizon: f64, events: Vec<RegimeEvent>) -> Self {
        debug_assert!(events.windows(2).all(|w| w[0].time < w[1].time));
        Self {
            origin,
            horizon,
            events,
        }
    }

    /// Path with no regime jumps.
    pub fn constant(origin: RegimeState, horizon: f64) -> Self {
        Self::new(origin, horizon, Vec::new())
    }

    pub fn origin(&self) -> RegimeState {
        self.origin
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[RegimeEvent] {
        &self.events
    }

    /// Left limit `(θ(t−), Y(t−))`.
    pub fn state_before(&self, t: f64) -> RegimeState {
        let n = self.events.partition_point(|e| e.time < t);
        self.state_after_events(n, t)
    }

    /// Right-continuous value `(θ(t), Y(t))`.
    pub fn state_at(&self, t: f64) -> RegimeState {
        let n = self.events.partition_point(|e| e.time <= t);
        self.state_after_events(n, t)
    }

    fn state_after_events(&self, n: usize, t: f64) -> RegimeState {
        if n == 0 {
            RegimeState::new(self.origin.theta, self.origin.age + t)
        } else {
            let e = &self.events[n - 1];
            RegimeState::new(e.to, t - e.time)
        }
    }

    pub fn terminal(&self) -> RegimeState {
        self.state_at(self.horizon)
    }

    /// Completed sojourns as `(state, length)`; the first sojourn is
    /// included only when it starts at age zero.
    pub fn completed_sojourns(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.events.len());
        let mut start = 0.0;
        for (k, e) in self.events.iter().enumerate() {
            if k > 0 || self.origin.age == 0.0 {
                out.push((e.from, e.time - start));
            }
            start = e.time;
        }
        out
    }

    /// Write `(t_event, new_state)` rows.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "t_event,new_state")?;
        for e in &self.events {
            writeln!(w, "{:.16e},{}", e.time, e.to)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RegimePath {
        RegimePath::new(
            RegimeState::new(0, 0.25),
            2.0,
            vec![
                RegimeEvent { time: 0.5, from: 0, to: 1, age_before: 0.75 },
                RegimeEvent { time: 1.5, from: 1, to: 0, age_before: 1.0 },
            ],
        )
    }

    #[test]
    fn left_and_right_limits() {
        let p = sample();
        assert_eq!(p.state_before(0.5), RegimeState::new(0, 0.75));
        assert_eq!(p.state_at(0.5), RegimeState::new(1, 0.0));
        assert_eq!(p.state_at(1.0), RegimeState::new(1, 0.5));
        assert_eq!(p.terminal(), RegimeState::new(0, 0.5));
    }

    #[test]
    fn sojourns_skip_aged_origin() {
        assert_eq!(sample().completed_sojourns(), vec![(1, 1.0)]);
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        sample().write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.lines().nth(1).unwrap().ends_with(",1"));
    }
}
