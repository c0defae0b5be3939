//! Phase-space points and time-stamped trajectories.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A point in phase space.
pub type State = DVector<f64>;

/// Build a state from a slice.
pub fn state(values: &[f64]) -> State {
    DVector::from_column_slice(values)
}

pub fn is_finite(x: &State) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Max-norm of a vector.
pub fn max_norm(x: &State) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Uniformly sampled states together with named observable channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<State>,
    channels: BTreeMap<String, Vec<f64>>,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            channels: BTreeMap::new(),
        }
    }

    /// Append a sample. Times must be strictly monotone in the direction of
    /// integration (increasing for h > 0, decreasing for h < 0).
    pub fn push(&mut self, t: f64, x: State, observables: &[(String, f64)]) -> Result<()> {
        if let (Some(&last), Some(&first)) = (self.times.last(), self.times.first()) {
            let forward = if self.times.len() >= 2 {
                self.times[1] > first
            } else {
                t > last
            };
            let ok = if forward { t > last } else { t < last };
            if !ok || t == last {
                return Err(Error::invalid(format!(
                    "trajectory times must be strictly monotone: {t} after {last}"
                )));
            }
        }
        let n = self.times.len();
        for (name, value) in observables {
            let channel = self.channels.entry(name.clone()).or_default();
            if channel.len() != n {
                return Err(Error::invalid(format!(
                    "observable `{name}` has {} samples, expected {n}",
                    channel.len()
                )));
            }
            channel.push(*value);
        }
        if self.channels.values().any(|c| c.len() != n + 1) {
            return Err(Error::invalid("every observable must be sampled at every state"));
        }
        self.times.push(t);
        self.states.push(x);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn last(&self) -> Option<&State> {
        self.states.last()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.get(name).map(|c| c.as_slice())
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(|s| s.as_str())
    }

    /// Largest absolute deviation of a channel from its initial value.
    pub fn max_drift(&self, name: &str) -> Option<f64> {
        let c = self.channel(name)?;
        let first = *c.first()?;
        Some(c.iter().fold(0.0_f64, |m, v| m.max((v - first).abs())))
    }
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::new()
    }
}
