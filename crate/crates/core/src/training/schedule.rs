//! Phase table controlling when and how strongly the prior target is
//! regenerated.

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePhase {
    /// Inclusive.
    pub iter_start: usize,
    /// Exclusive.
    pub iter_end: usize,
    pub noise_strength: f64,
    pub update_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSchedule {
    pub phases: Vec<SchedulePhase>,
    pub prior_start_iter: usize,
}

/// Answer of [`PriorSchedule::query`] for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub active: bool,
    pub noise_strength: f64,
    pub regenerate_target: bool,
}

impl ScheduleState {
    const INACTIVE: Self = Self {
        active: false,
        noise_strength: 0.0,
        regenerate_target: false,
    };
}

impl PriorSchedule {
    pub fn new(phases: Vec<SchedulePhase>, prior_start_iter: usize) -> Result<Self, TrainError> {
        let s = Self { phases, prior_start_iter };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        for p in &self.phases {
            if p.iter_start >= p.iter_end {
                return bad(format!("phase [{}, {}) is empty", p.iter_start, p.iter_end));
            }
            if p.update_every == 0 {
                return bad("update_every must be >= 1".into());
            }
            if !(0.0..=1.0).contains(&p.noise_strength) {
                return bad(format!("noise strength {} outside [0,1]", p.noise_strength));
            }
        }
        for w in self.phases.windows(2) {
            if w[1].iter_start < w[0].iter_end {
                return bad(format!(
                    "phases [{}, {}) and [{}, {}) overlap or are out of order",
                    w[0].iter_start, w[0].iter_end, w[1].iter_start, w[1].iter_end
                ));
            }
        }
        if let Some(first) = self.phases.first() {
            if self.prior_start_iter > first.iter_start {
                return bad(format!(
                    "prior_start_iter {} is after the first phase start {}",
                    self.prior_start_iter, first.iter_start
                ));
            }
        }
        Ok(())
    }

    /// Prior from iteration 1000: strength 0.4 every 10 iterations until
    /// 3000, 0.3 every 100 until 5000, then 0.2 every 2000 until 12000.
    pub fn default_schedule() -> Self {
        let phase = |iter_start, iter_end, noise_strength, update_every| SchedulePhase {
            iter_start,
            iter_end,
            noise_strength,
            update_every,
        };
        Self {
            phases: vec![phase(1000, 3000, 0.4, 10), phase(3000, 5000, 0.3, 100), phase(5000, 12000, 0.2, 2000)],
            prior_start_iter: 1000,
        }
    }

    /// One phase regenerating the target at every iteration of `[start, end)`.
    pub fn per_step(start: usize, end: usize, noise_strength: f64) -> Self {
        Self {
            phases: vec![SchedulePhase {
                iter_start: start,
                iter_end: end,
                noise_strength,
                update_every: 1,
            }],
            prior_start_iter: start,
        }
    }

    pub fn empty() -> Self {
        Self {
            phases: Vec::new(),
            prior_start_iter: 0,
        }
    }

    pub fn query(&self, iter: usize) -> ScheduleState {
        if iter < self.prior_start_iter {
            return ScheduleState::INACTIVE;
        }
        self.phases
            .iter()
            .find(|p| p.iter_start <= iter && iter < p.iter_end)
            .map_or(ScheduleState::INACTIVE, |p| ScheduleState {
                active: true,
                noise_strength: p.noise_strength,
                regenerate_target: (iter - p.iter_start) % p.update_every == 0,
            })
    }

    /// Number of iterations at which the target is regenerated.
    pub fn count_target_generations(&self) -> usize {
        self.phases
            .iter()
            .map(|p| {
                let start = p.iter_start.max(self.prior_start_iter);
                if start >= p.iter_end {
                    return 0;
                }
                // first regeneration at or after `start` on the phase's grid
                let first = p.iter_start + (start - p.iter_start).div_ceil(p.update_every) * p.update_every;
                if first >= p.iter_end {
                    0
                } else {
                    (p.iter_end - 1 - first) / p.update_every + 1
                }
            })
            .sum()
    }

    /// One past the last iteration any phase covers.
    pub fn end(&self) -> usize {
        self.phases.last().map_or(0, |p| p.iter_end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enumerate(s: &PriorSchedule, upto: usize) -> usize {
        (0..upto).filter(|&i| s.query(i).regenerate_target).count()
    }

    #[test]
    fn default_phases() {
        let s = PriorSchedule::default_schedule();
        let pairs: Vec<(f64, usize)> = s.phases.iter().map(|p| (p.noise_strength, p.update_every)).collect();
        assert_eq!(pairs, vec![(0.4, 10), (0.3, 100), (0.2, 2000)]);
        assert_eq!(s.prior_start_iter, 1000);
        assert_eq!(s.phases.first().unwrap().iter_start, 1000);
        assert_eq!(s.end(), 12000);
        for w in s.phases.windows(2) {
            assert_eq!(w[0].iter_end, w[1].iter_start);
            assert!(w[0].noise_strength >= w[1].noise_strength);
            assert!(w[0].update_every <= w[1].update_every);
        }
        s.validate().unwrap();
    }

    #[test]
    fn queries() {
        let s = PriorSchedule::default_schedule();
        assert!(!s.query(999).active);
        assert_eq!(
            s.query(1000),
            ScheduleState {
                active: true,
                noise_strength: 0.4,
                regenerate_target: true
            }
        );
        let q = s.query(1005);
        assert!(q.active && q.noise_strength == 0.4 && !q.regenerate_target);
        assert!(s.query(3000).regenerate_target && s.query(3000).noise_strength == 0.3);
        assert!(!s.query(12000).active);
    }

    #[test]
    fn generation_counts() {
        assert_eq!(PriorSchedule::default_schedule().count_target_generations(), 224);
        assert_eq!(enumerate(&PriorSchedule::default_schedule(), 12000), 224);
        assert_eq!(PriorSchedule::per_step(1000, 12000, 0.4).count_target_generations(), 11000);
        assert_eq!(PriorSchedule::empty().count_target_generations(), 0);
    }

    #[test]
    fn rejects_overlap_and_bad_start() {
        let p = |a, b| SchedulePhase {
            iter_start: a,
            iter_end: b,
            noise_strength: 0.3,
            update_every: 5,
        };
        assert!(PriorSchedule::new(vec![p(0, 10), p(5, 20)], 0).is_err());
        assert!(PriorSchedule::new(vec![p(10, 10)], 0).is_err());
        assert!(PriorSchedule::new(vec![p(10, 20)], 15).is_err());
        assert!(PriorSchedule::new(vec![p(10, 20), p(20, 30)], 3).is_ok());
    }

    proptest! {
        #[test]
        fn closed_form_count_matches_enumeration(
            starts in proptest::collection::vec((1usize..60, 1usize..80, 1usize..25), 0..4),
            offset in 0usize..40,
        ) {
            let mut phases = Vec::new();
            let mut cursor = offset;
            for (gap, len, every) in starts {
                let start = cursor + gap;
                phases.push(SchedulePhase { iter_start: start, iter_end: start + len, noise_strength: 0.2, update_every: every });
                cursor = start + len;
            }
            let prior_start = phases.first().map_or(0, |p| p.iter_start);
            let s = PriorSchedule::new(phases, prior_start).unwrap();
            prop_assert_eq!(s.count_target_generations(), enumerate(&s, s.end() + 5));
        }
    }
}
