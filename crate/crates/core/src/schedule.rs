//! Phase controller: regularizer-light warm-up for `t_gamma` steps, a
//! one-shot mixture initialization at that boundary, then `periods` cycles
//! of polynomial annealing (`t_beta` steps) followed by `t_static` steps of
//! the plain objective.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::mixture::DEFAULT_LAMBDA;

fn default_exponent() -> u32 {
    3
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// All step counts are in mini-batch steps; step indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    pub gamma: f64,
    pub t_gamma: u64,
    pub t_beta: u64,
    pub t_static: u64,
    pub periods: u64,
    #[serde(default = "default_exponent")]
    pub u: u32,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phase {
    GammaTraining,
    /// The boundary between step `t_gamma` and `t_gamma + 1`; never
    /// returned by [`TrainingSchedule::phase_at`].
    GmmInit,
    BetaAnnealing { period: u64 },
    Static { period: u64 },
    Done,
}

impl Phase {
    pub fn label(&self) -> &'static str {
        match self {
            Phase::GammaTraining => "gamma",
            Phase::GmmInit => "gmm_init",
            Phase::BetaAnnealing { .. } => "anneal",
            Phase::Static { .. } => "static",
            Phase::Done => "done",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::BetaAnnealing { period } | Phase::Static { period } => {
                write!(f, "{}(m={period})", self.label())
            }
            _ => f.write_str(self.label()),
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    /// Parses the [`Display`](std::fmt::Display) form, e.g. `anneal(m=2)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized phase `{s}`"));
        let (label, period) = match s.split_once("(m=") {
            Some((label, rest)) => {
                let digits = rest.strip_suffix(')').ok_or_else(bad)?;
                (label, Some(digits.parse::<u64>().map_err(|_| bad())?))
            }
            None => (s, None),
        };
        match (label, period) {
            ("gamma", None) => Ok(Phase::GammaTraining),
            ("gmm_init", None) => Ok(Phase::GmmInit),
            ("done", None) => Ok(Phase::Done),
            ("anneal", Some(period)) => Ok(Phase::BetaAnnealing { period }),
            ("static", Some(period)) => Ok(Phase::Static { period }),
            _ => Err(bad()),
        }
    }
}

impl TrainingSchedule {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let key = |k: &str| format!("{prefix}{k}");
        let mut out = Vec::new();
        if !(self.gamma > 0.0 && self.gamma < 0.1) {
            out.push(ConfigIssue::new(key("gamma"), "must satisfy 0 < gamma < 0.1"));
        }
        for (name, v) in [
            ("t_gamma", self.t_gamma),
            ("t_beta", self.t_beta),
            ("t_static", self.t_static),
            ("periods", self.periods),
        ] {
            if v == 0 {
                out.push(ConfigIssue::new(key(name), "must be a positive step count"));
            }
        }
        if self.u == 0 {
            out.push(ConfigIssue::new(key("u"), "must be a positive integer"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            out.push(ConfigIssue::new(key("lambda"), "must be positive and finite"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("schedule.");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn period_len(&self) -> u64 {
        self.t_beta + self.t_static
    }

    pub fn total_steps(&self) -> u64 {
        self.t_gamma + self.periods * self.period_len()
    }

    /// Step after which the mixture prior is fitted.
    pub fn gmm_init_after(&self) -> u64 {
        self.t_gamma
    }

    pub fn phase_at(&self, t: u64) -> Phase {
        if t <= self.t_gamma {
            return Phase::GammaTraining;
        }
        if t > self.total_steps() {
            return Phase::Done;
        }
        let offset = t - self.t_gamma - 1;
        let period = offset / self.period_len() + 1;
        if offset % self.period_len() < self.t_beta {
            Phase::BetaAnnealing { period }
        } else {
            Phase::Static { period }
        }
    }

    /// `gamma + ((t - T_m) / t_beta)^u` with `T_m` the step before period `m`.
    pub fn beta_at(&self, t: u64) -> Result<f64> {
        match self.phase_at(t) {
            Phase::BetaAnnealing { period } => {
                let start = self.t_gamma + (period - 1) * self.period_len();
                let progress = (t - start) as f64 / self.t_beta as f64;
                Ok(self.gamma + progress.powi(self.u as i32))
            }
            other => Err(Error::Contract(format!(
                "beta requested at step {t}, which is in phase {other}"
            ))),
        }
    }

    pub fn regularizer_weight_at(&self, t: u64) -> Result<f64> {
        match self.phase_at(t) {
            Phase::GammaTraining => Ok(self.gamma),
            Phase::BetaAnnealing { .. } => self.beta_at(t),
            Phase::Static { .. } => Ok(1.0),
            Phase::Done | Phase::GmmInit => Err(Error::Contract(format!(
                "no regularizer weight after the final step ({t} > {})",
                self.total_steps()
            ))),
        }
    }

    /// Last step of every phase, in order, with the phase it closes.
    pub fn boundaries(&self) -> Vec<(u64, Phase)> {
        let mut out = vec![(self.t_gamma, Phase::GmmInit)];
        for m in 1..=self.periods {
            let start = self.t_gamma + (m - 1) * self.period_len();
            out.push((start + self.t_beta, Phase::BetaAnnealing { period: m }));
            out.push((start + self.period_len(), Phase::Static { period: m }));
        }
        out
    }
}

/// Hyper-parameter rows of the published benchmark table, for reference
/// configs and schedule checks: `(name, gamma, t_gamma, t_beta, t_static, periods)`.
pub const REFERENCE_SCHEDULES: [(&str, f64, u64, u64, u64, u64); 4] = [
    ("inertial_har", 5e-6, 6_000, 2_500, 500, 2),
    ("mnist", 5e-4, 100_000, 9_000, 1_000, 10),
    ("fashion", 5e-3, 100_000, 9_000, 1_000, 10),
    ("behavior_10m", 5e-4, 25_000, 4_500, 500, 6),
];

pub fn reference_schedule(name: &str) -> Option<TrainingSchedule> {
    REFERENCE_SCHEDULES
        .iter()
        .find(|row| row.0 == name)
        .map(|&(_, gamma, t_gamma, t_beta, t_static, periods)| TrainingSchedule {
            gamma,
            t_gamma,
            t_beta,
            t_static,
            periods,
            u: 3,
            lambda: DEFAULT_LAMBDA,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phase_text_round_trips() {
        for p in [
            Phase::GammaTraining,
            Phase::GmmInit,
            Phase::BetaAnnealing { period: 3 },
            Phase::Static { period: 12 },
            Phase::Done,
        ] {
            assert_eq!(p.to_string().parse::<Phase>().unwrap(), p);
        }
        assert!("anneal".parse::<Phase>().is_err());
        assert!("static(m=x)".parse::<Phase>().is_err());
    }

    fn mnist() -> TrainingSchedule {
        reference_schedule("mnist").unwrap()
    }

    #[test]
    fn phase_examples() {
        let s = mnist();
        assert_eq!(s.phase_at(1), Phase::GammaTraining);
        assert_eq!(s.phase_at(100_000), Phase::GammaTraining);
        assert_eq!(s.phase_at(100_001), Phase::BetaAnnealing { period: 1 });
        assert_eq!(s.phase_at(109_000), Phase::BetaAnnealing { period: 1 });
        assert_eq!(s.phase_at(109_001), Phase::Static { period: 1 });
        assert_eq!(s.phase_at(110_001), Phase::BetaAnnealing { period: 2 });
        assert_eq!(s.total_steps(), 200_000);
        assert_eq!(s.phase_at(200_000), Phase::Static { period: 10 });
        assert_eq!(s.phase_at(200_001), Phase::Done);
    }

    #[test]
    fn beta_examples() {
        let s = mnist();
        assert!((s.beta_at(100_001).unwrap() - (5e-4 + (1.0f64 / 9000.0).powi(3))).abs() < 1e-15);
        assert_eq!(s.beta_at(109_000).unwrap(), 5e-4 + 1.0);
        assert!((s.beta_at(104_500).unwrap() - 0.1255).abs() < 1e-12);
        assert!(matches!(s.beta_at(5), Err(Error::Contract(_))));
        assert!(matches!(s.beta_at(109_001), Err(Error::Contract(_))));
    }

    #[test]
    fn weight_examples() {
        let s = mnist();
        assert_eq!(s.regularizer_weight_at(17).unwrap(), 5e-4);
        assert_eq!(s.regularizer_weight_at(109_500).unwrap(), 1.0);
        assert_eq!(s.regularizer_weight_at(109_000).unwrap(), 1.0 + 5e-4);
        assert_eq!(s.regularizer_weight_at(109_001).unwrap(), 1.0);
        assert!(s.regularizer_weight_at(200_001).is_err());
    }

    #[test]
    fn reference_totals() {
        let har = reference_schedule("inertial_har").unwrap();
        assert_eq!(har.total_steps(), 12_000);
        assert_eq!(reference_schedule("fashion").unwrap().total_steps(), 200_000);
        assert_eq!(reference_schedule("behavior_10m").unwrap().total_steps(), 55_000);
    }

    #[test]
    fn validation_lists_every_issue() {
        let s = TrainingSchedule {
            gamma: 0.5,
            t_gamma: 0,
            t_beta: 1,
            t_static: 0,
            periods: 1,
            u: 3,
            lambda: -1.0,
        };
        let Err(Error::Config(issues)) = s.validate() else {
            panic!("expected config error")
        };
        let keys: Vec<_> = issues.iter().map(|i| i.key.as_str()).collect();
        assert_eq!(
            keys,
            ["schedule.gamma", "schedule.t_gamma", "schedule.t_static", "schedule.lambda"]
        );
    }

    #[test]
    fn boundaries_cover_every_phase_end() {
        let s = reference_schedule("inertial_har").unwrap();
        let b = s.boundaries();
        assert_eq!(b.first().unwrap().0, 6_000);
        assert_eq!(b.last().unwrap().0, s.total_steps());
        assert_eq!(b.len(), 1 + 2 * 2);
        for &(t, phase) in &b[1..] {
            assert_eq!(s.phase_at(t), phase);
            assert_ne!(s.phase_at(t + 1), phase);
        }
    }

    proptest! {
        #[test]
        fn partition_and_weight_bounds(
            t_gamma in 1u64..50,
            t_beta in 1u64..30,
            t_static in 1u64..30,
            periods in 1u64..5,
            gamma in 1e-6f64..0.09,
            u in 1u32..5,
        ) {
            let s = TrainingSchedule { gamma, t_gamma, t_beta, t_static, periods, u, lambda: 50.0 };
            let (mut g, mut b, mut st) = (0u64, 0u64, 0u64);
            let mut last_beta: Option<(u64, f64)> = None;
            let mut max_w = 0f64;
            for t in 1..=s.total_steps() {
                let w = s.regularizer_weight_at(t).unwrap();
                prop_assert!(w > 0.0 && w <= gamma + 1.0);
                max_w = max_w.max(w);
                match s.phase_at(t) {
                    Phase::GammaTraining => g += 1,
                    Phase::BetaAnnealing { period } => {
                        b += 1;
                        if let Some((p, prev)) = last_beta {
                            if p == period { prop_assert!(w > prev); }
                        }
                        last_beta = Some((period, w));
                    }
                    Phase::Static { .. } => st += 1,
                    other => prop_assert!(false, "unexpected {other:?}"),
                }
            }
            prop_assert_eq!(g, t_gamma);
            prop_assert_eq!(b, periods * t_beta);
            prop_assert_eq!(st, periods * t_static);
            prop_assert!((max_w - (gamma + 1.0)).abs() < 1e-12);
            prop_assert_eq!(s.phase_at(s.total_steps() + 1), Phase::Done);
        }
    }
}
