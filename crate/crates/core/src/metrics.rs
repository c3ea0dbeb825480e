//! Per-second counters.

use serde::{Deserialize, Serialize};

use crate::simnet::{Time, SEC};

/// Event counts binned by simulated second.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Series(Vec<u64>);

impl Series {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, t: Time) {
        self.add_n(t, 1);
    }

    pub fn add_n(&mut self, t: Time, n: u64) {
        let bin = (t / SEC) as usize;
        if self.0.len() <= bin {
            self.0.resize(bin + 1, 0);
        }
        self.0[bin] += n;
    }

    pub fn from_times(times: impl IntoIterator<Item = Time>) -> Self {
        let mut s = Self::new();
        for t in times {
            s.add(t);
        }
        s
    }

    /// Count in second `i` (zero past the end).
    pub fn get(&self, i: usize) -> u64 {
        self.0.get(i).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn bins(&self) -> &[u64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_by_second() {
        let s = Series::from_times([0, SEC - 1, SEC, 3 * SEC + 5]);
        assert_eq!(s.bins(), &[2, 1, 0, 1]);
        assert_eq!(s.get(10), 0);
        assert_eq!(s.total(), 4);
    }
}
