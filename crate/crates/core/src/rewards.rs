//! Structural-similarity rewards: a scaled base term plus a designability bonus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Tm,
    Gdt,
    Rmsd,
    GdtRmsd,
}

impl std::str::FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tm" => Ok(Self::Tm),
            "gdt" => Ok(Self::Gdt),
            "rmsd" => Ok(Self::Rmsd),
            "gdt_rmsd" => Ok(Self::GdtRmsd),
            other => Err(Error::Config(format!("unknown reward kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_gdt_scale: f64,
    pub w_tm_scale: f64,
    pub w_rmsd_scale: f64,
    pub w_bonus_gdt: f64,
    pub w_bonus_rmsd: f64,
    pub tau_gdt: f64,
    pub tau_rmsd: f64,
    pub base_kind: BaseKind,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_gdt_scale: 5.0,
            w_tm_scale: 5.0,
            w_rmsd_scale: 0.5,
            w_bonus_gdt: 100.0,
            w_bonus_rmsd: 20.0,
            tau_gdt: 0.5,
            tau_rmsd: 2.0,
            base_kind: BaseKind::GdtRmsd,
        }
    }
}

impl RewardConfig {
    pub fn with_kind(base_kind: BaseKind) -> Self {
        Self {
            base_kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_gdt_scale, self.w_tm_scale, self.w_rmsd_scale, self.w_bonus_gdt, self.w_bonus_rmsd];
        if !weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return Err(Error::Config("reward weights must be positive".into()));
        }
        if !(self.tau_gdt > 0.0 && self.tau_gdt < 1.0) || !(self.tau_rmsd > 0.0 && self.tau_rmsd.is_finite()) {
            return Err(Error::Config("reward thresholds out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub base: f64,
    pub bonus: f64,
    pub total: f64,
}

pub fn base_reward(cfg: &RewardConfig, m: &MetricsReport) -> f64 {
    let gdt = (m.gdt_ts * cfg.w_gdt_scale).powi(2);
    let tm = (m.tm_score * cfg.w_tm_scale).powi(2);
    let rmsd = -(m.rmsd * cfg.w_rmsd_scale).powi(2);
    match cfg.base_kind {
        BaseKind::Tm => tm,
        BaseKind::Gdt => gdt,
        BaseKind::Rmsd => rmsd,
        BaseKind::GdtRmsd => rmsd + gdt,
    }
}

/// The GDT branch wins whenever it applies; both comparisons are strict.
pub fn bonus_reward(cfg: &RewardConfig, m: &MetricsReport) -> f64 {
    if m.gdt_ts > cfg.tau_gdt {
        (m.gdt_ts - cfg.tau_gdt) * cfg.w_bonus_gdt
    } else if m.rmsd < cfg.tau_rmsd {
        (cfg.tau_rmsd - m.rmsd) * cfg.w_bonus_rmsd
    } else {
        0.0
    }
}

pub fn total_reward(cfg: &RewardConfig, m: &MetricsReport) -> f64 {
    base_reward(cfg, m) + bonus_reward(cfg, m)
}

pub fn reward_breakdown(cfg: &RewardConfig, m: &MetricsReport) -> RewardBreakdown {
    let base = base_reward(cfg, m);
    let bonus = bonus_reward(cfg, m);
    RewardBreakdown {
        base,
        bonus,
        total: base + bonus,
    }
}
