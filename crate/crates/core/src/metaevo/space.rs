use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::substrate::HyperParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperKind {
    Int,
    Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperName {
    LearningRate,
    BatchSize,
    StepsPerUpdate,
    SoftmaxTemp,
    PerHidUpd,
}

impl HyperName {
    pub fn as_str(self) -> &'static str {
        match self {
            HyperName::LearningRate => "learning_rate",
            HyperName::BatchSize => "batch_size",
            HyperName::StepsPerUpdate => "steps_per_update",
            HyperName::SoftmaxTemp => "softmax_temp",
            HyperName::PerHidUpd => "per_hid_upd",
        }
    }

    pub fn get(self, hp: &HyperParams) -> f64 {
        match self {
            HyperName::LearningRate => hp.learning_rate,
            HyperName::BatchSize => hp.batch_size as f64,
            HyperName::StepsPerUpdate => hp.steps_per_update as f64,
            HyperName::SoftmaxTemp => hp.softmax_temp,
            HyperName::PerHidUpd => hp.per_hid_upd,
        }
    }

    /// Integer fields take `value` already rounded.
    pub fn set(self, hp: &mut HyperParams, value: f64) {
        match self {
            HyperName::LearningRate => hp.learning_rate = value,
            HyperName::BatchSize => hp.batch_size = value as u32,
            HyperName::StepsPerUpdate => hp.steps_per_update = value as u32,
            HyperName::SoftmaxTemp => hp.softmax_temp = value,
            HyperName::PerHidUpd => hp.per_hid_upd = value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSpec {
    pub name: HyperName,
    pub kind: HyperKind,
    pub lo: f64,
    pub hi: f64,
    pub log: bool,
    pub default: f64,
}

impl HyperSpec {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi && (self.kind == HyperKind::Float || v.fract() == 0.0)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match (self.kind, self.log) {
            (HyperKind::Int, _) => rng.gen_range(self.lo as i64..=self.hi as i64) as f64,
            (HyperKind::Float, true) => rng
                .gen_range(self.lo.ln()..=self.hi.ln())
                .exp()
                .clamp(self.lo, self.hi),
            (HyperKind::Float, false) => rng.gen_range(self.lo..=self.hi),
        }
    }

    /// Clip to range, then round integers half up.
    pub fn conform(&self, v: f64) -> f64 {
        let v = v.clamp(self.lo, self.hi);
        match self.kind {
            HyperKind::Int => round_half_up(v),
            HyperKind::Float => v,
        }
    }
}

pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSpace {
    pub specs: Vec<HyperSpec>,
}

impl HyperSpace {
    /// Learning rate, batch size and steps per update.
    pub fn base() -> Self {
        Self {
            specs: vec![
                HyperSpec {
                    name: HyperName::LearningRate,
                    kind: HyperKind::Float,
                    lo: 1e-6,
                    hi: 1.0,
                    log: true,
                    default: 3e-4,
                },
                HyperSpec {
                    name: HyperName::BatchSize,
                    kind: HyperKind::Int,
                    lo: 1.0,
                    hi: 8.0,
                    log: false,
                    default: 8.0,
                },
                HyperSpec {
                    name: HyperName::StepsPerUpdate,
                    kind: HyperKind::Int,
                    lo: 1.0,
                    hi: 64.0,
                    log: false,
                    default: 4.0,
                },
            ],
        }
    }

    /// Base space plus softmax temperature and hidden update probability.
    pub fn extended() -> Self {
        let mut s = Self::base();
        s.specs.push(HyperSpec {
            name: HyperName::SoftmaxTemp,
            kind: HyperKind::Float,
            lo: 0.05,
            hi: 5.0,
            log: true,
            default: 1.0,
        });
        s.specs.push(HyperSpec {
            name: HyperName::PerHidUpd,
            kind: HyperKind::Float,
            lo: 0.05,
            hi: 1.0,
            log: false,
            default: 1.0,
        });
        s
    }

    pub fn new(extended: bool) -> Self {
        if extended {
            Self::extended()
        } else {
            Self::base()
        }
    }

    pub fn defaults(&self) -> HyperParams {
        let mut hp = HyperParams::default();
        for s in &self.specs {
            s.name.set(&mut hp, s.default);
        }
        hp
    }

    pub fn contains(&self, hp: &HyperParams) -> bool {
        self.specs.iter().all(|s| s.contains(s.name.get(hp)))
    }

    /// Draws in spec order; parameters outside the space keep their defaults.
    pub fn sample(&self, rng: &mut impl Rng) -> HyperParams {
        let mut hp = self.defaults();
        for s in &self.specs {
            s.name.set(&mut hp, s.sample(rng));
        }
        hp
    }
}

/// With probability `p_pert` scale by 1.2 or 0.8 (even odds), then conform.
pub fn mutate_value(value: f64, spec: &HyperSpec, rng: &mut impl Rng, p_pert: f64) -> f64 {
    if !rng.gen_bool(p_pert) {
        return value;
    }
    let factor = if rng.gen_bool(0.5) { 1.2 } else { 0.8 };
    spec.conform(value * factor)
}

pub fn composite_score(novelty: f64, diversity: f64, healthy: bool) -> f64 {
    if healthy {
        novelty + diversity
    } else {
        f64::NEG_INFINITY
    }
}

/// `round(rho * P)`, halves rounded up.
pub fn replacement_count(rho: f64, population: usize) -> usize {
    round_half_up(rho * population as f64).max(0.0) as usize
}
