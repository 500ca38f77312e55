//! Ablation runner: one training run per arm on identical data, evaluated
//! on identical held-out scenes.

use std::fmt;

use crate::error::{Error, Result};
use crate::objective::MetricsReport;

use super::config::{Toggles, TrainConfig};
use super::eval::{ModelPredictor, evaluate};
use super::train::{train_on, training_scenes};

/// Module switches an arm can turn off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Depth,
    Dist,
    Silh,
    Mask,
}

impl Toggle {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "depth" => Ok(Toggle::Depth),
            "dist" => Ok(Toggle::Dist),
            "silh" => Ok(Toggle::Silh),
            "mask" => Ok(Toggle::Mask),
            other => Err(Error::Config(format!(
                "unknown toggle `{other}` (expected depth, dist, silh or mask)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Toggle::Depth => "depth",
            Toggle::Dist => "dist",
            Toggle::Silh => "silh",
            Toggle::Mask => "mask",
        }
    }

    fn disable(self, t: &mut Toggles) {
        match self {
            Toggle::Depth => t.depth_stream = false,
            Toggle::Dist => t.distribution = false,
            Toggle::Silh => t.silhouette = false,
            Toggle::Mask => t.masking = false,
        }
    }
}

/// A set of modules switched off together; empty means the full model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arm {
    pub off: Vec<Toggle>,
}

impl Arm {
    pub fn full() -> Self {
        Arm { off: Vec::new() }
    }

    pub fn label(&self) -> String {
        if self.off.is_empty() {
            "full".into()
        } else {
            self.off.iter().map(|t| format!("-{}", t.name())).collect::<Vec<_>>().join("")
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        for t in &self.off {
            t.disable(&mut cfg.toggles);
        }
        cfg
    }
}

/// Parses `depth,dist,silh+mask`: comma-separated arms, each a `+`-joined
/// set of modules to switch off. `all` switches everything off.
pub fn parse_arms(list: &str) -> Result<Vec<Arm>> {
    let mut arms = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let off = if part == "all" {
            vec![Toggle::Depth, Toggle::Dist, Toggle::Silh, Toggle::Mask]
        } else {
            part.split('+').map(Toggle::parse).collect::<Result<Vec<_>>>()?
        };
        arms.push(Arm { off });
    }
    if arms.is_empty() {
        return Err(Error::Config("no ablation arms given".into()));
    }
    Ok(arms)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub arm: Arm,
    pub metrics: MetricsReport,
    pub final_loss: f64,
}

/// Rows in run order; the full model is always first.
#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn full(&self) -> &AblationRow {
        &self.rows[0]
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm.label() == label)
    }

    /// `row − full` for each metric.
    pub fn delta(&self, row: &AblationRow) -> [f64; 4] {
        let f = self.full().metrics.values();
        let r = row.metrics.values();
        std::array::from_fn(|i| r[i] - f[i])
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<18}", "arm")?;
        for k in MetricsReport::KEYS {
            write!(f, " {k:>10} {:>9}", format!("Δ{k}").chars().take(9).collect::<String>())?;
        }
        writeln!(f, " {:>12}", "final_loss")?;
        for row in &self.rows {
            write!(f, "{:<18}", row.arm.label())?;
            for (v, d) in row.metrics.values().iter().zip(self.delta(row)) {
                write!(f, " {v:>10.3} {d:>+9.3}")?;
            }
            writeln!(f, " {:>12.5}", row.final_loss)?;
        }
        Ok(())
    }
}

/// Trains the full model and every arm on the same scenes and seeds.
pub fn ablate(base: &TrainConfig, arms: &[Arm], test_seeds: &[u64]) -> Result<AblationTable> {
    base.validate()?;
    let scenes = training_scenes(base)?;
    let mut all = vec![Arm::full()];
    all.extend(arms.iter().filter(|a| !a.off.is_empty()).cloned());
    let mut rows = Vec::with_capacity(all.len());
    for arm in all {
        let cfg = arm.apply(base);
        let run = train_on(&cfg, &scenes)?;
        let predictor = ModelPredictor {
            params: &run.params,
            config: &cfg,
        };
        let metrics = evaluate(&predictor, &cfg, test_seeds)?;
        let final_loss = run.log.last().map_or(f64::NAN, |l| l.total);
        rows.push(AblationRow { arm, metrics, final_loss });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::eval::default_test_seeds;

    #[test]
    fn arm_parsing() {
        let arms = parse_arms("depth, dist,silh+mask").unwrap();
        assert_eq!(arms.len(), 3);
        assert_eq!(arms[2].label(), "-silh-mask");
        assert_eq!(parse_arms("all").unwrap()[0].off.len(), 4);
        assert!(matches!(parse_arms("depth,wings"), Err(Error::Config(_))));
        assert!(parse_arms(" , ").is_err());
        let cfg = arms[2].apply(&TrainConfig::default());
        assert!(!cfg.toggles.silhouette && !cfg.toggles.masking && cfg.toggles.depth_stream);
    }

    #[test]
    fn everything_off_then_on_gives_two_rows() {
        let cfg = TrainConfig::reduced();
        let table = ablate(&cfg, &parse_arms("all").unwrap(), &default_test_seeds(2)).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.full().arm.label(), "full");
        assert_ne!(table.rows[0].metrics, table.rows[1].metrics);
        assert_eq!(table.delta(table.full()), [0.0; 4]);
        let text = table.to_string();
        let header = text.lines().next().unwrap();
        for line in text.lines().skip(1) {
            assert_eq!(line.split_whitespace().count(), header.split_whitespace().count());
        }
        assert!(table.row("-depth-dist-silh-mask").is_some());
    }
}
