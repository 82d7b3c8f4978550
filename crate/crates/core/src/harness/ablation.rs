//! Ablation grids over module combinations, fusion insertion depth and
//! wavelet levels; every grid point is trained and evaluated per seed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;

use super::config::RunConfig;
use super::data::LoadedData;
use super::eval::{evaluate, EvalReport};
use super::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Modules,
    Insertion,
    DwtLevel,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Modules => "modules",
            AblationAxis::Insertion => "insertion",
            AblationAxis::DwtLevel => "dwt_level",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(Self::Modules),
            "insertion" | "insertion_depth" => Ok(Self::Insertion),
            "dwt" | "dwt_level" => Ok(Self::DwtLevel),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub config: RunConfig,
}

/// Block indices `round(i * (depth - 1) / 3)` for `i = 0..4`.
pub fn insertion_positions(depth: usize) -> [usize; 4] {
    let last = depth.saturating_sub(1) as f64;
    [0, 1, 2, 3].map(|i| (i as f64 * last / 3.0).round() as usize)
}

pub fn grid(axis: AblationAxis, base: &RunConfig) -> Vec<GridPoint> {
    let point = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        GridPoint { label, config }
    };
    match axis {
        AblationAxis::Modules => Variant::ALL
            .iter()
            .map(|&v| {
                point(v.label().to_string(), &|c| {
                    c.model = c.model.clone().with_variant(v);
                })
            })
            .collect(),
        AblationAxis::Insertion => ["early", "middle", "deep", "last"]
            .iter()
            .zip(insertion_positions(base.model.depth))
            .map(|(name, p)| {
                point(format!("{name} (block {p})"), &|c| {
                    c.model = c.model.clone().with_variant(Variant::Full);
                    c.model.insertion_layer = Some(p);
                })
            })
            .collect(),
        AblationAxis::DwtLevel => (1..=4)
            .map(|l| {
                point(format!("L={l}"), &|c| {
                    c.model.dwt_levels = l;
                })
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub median_accuracy: f64,
    pub reports: Vec<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Row labels ordered by descending median accuracy, ties in grid order.
    pub fn ranked(&self) -> Vec<&AblationRow> {
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.median_accuracy.total_cmp(&a.median_accuracy));
        rows
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One line per grid point and seed plus a median line per point.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,label,seed,accuracy,ci95\n");
        for r in &self.rows {
            for ((seed, acc), rep) in r.seeds.iter().zip(&r.accuracies).zip(&r.reports) {
                s.push_str(&format!("{},{},{seed},{acc},{}\n", self.axis, r.label, rep.ci95));
            }
            s.push_str(&format!("{},{},median,{},\n", self.axis, r.label, r.median_accuracy));
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Trains and evaluates every grid point for each seed. The seed sets the
/// initialization, episode stream and augmentation; evaluation episodes are
/// shared across grid points.
pub fn run_grid(points: &[GridPoint], data: &LoadedData, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    points
        .iter()
        .map(|p| {
            let mut reports = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut cfg = p.config.clone();
                cfg.train.seed = seed;
                let out = train(&cfg, data, None)?;
                let rep = evaluate(&out.best.net, data, &cfg.eval, &cfg.fingerprint())?;
                log::info!("{} seed {seed}: accuracy {:.4}", p.label, rep.accuracy);
                reports.push(rep);
            }
            let accuracies: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
            Ok(AblationRow {
                label: p.label.clone(),
                seeds: seeds.to_vec(),
                median_accuracy: median(&accuracies),
                accuracies,
                reports,
            })
        })
        .collect()
}

pub fn run_ablation(axis: AblationAxis, base: &RunConfig, data: &LoadedData, seeds: &[u64]) -> Result<AblationTable> {
    let points = grid(axis, base);
    for p in &points {
        p.config.validate()?;
    }
    Ok(AblationTable {
        axis,
        rows: run_grid(&points, data, seeds)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_table_layouts() {
        let base = RunConfig::default();
        let m = grid(AblationAxis::Modules, &base);
        let labels: Vec<&str> = m.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["baseline", "+AMFF", "+ACA-SFF", "full"]);
        assert_eq!((m[0].config.model.use_amff, m[0].config.model.use_acasff), (false, false));
        assert_eq!((m[3].config.model.use_amff, m[3].config.model.use_acasff), (true, true));

        let d = grid(AblationAxis::DwtLevel, &base);
        assert_eq!(d.len(), 4);
        assert_eq!(d.iter().map(|p| p.config.model.dwt_levels).collect::<Vec<_>>(), [1, 2, 3, 4]);

        let i = grid(AblationAxis::Insertion, &base);
        assert_eq!(i.len(), 4);
        assert_eq!(
            i.iter().map(|p| p.config.model.insertion_layer).collect::<Vec<_>>(),
            [Some(0), Some(1), Some(2), Some(3)]
        );
        assert_eq!(insertion_positions(12), [0, 4, 7, 11]);
        assert!(i.iter().all(|p| p.config.validate().is_ok()));
    }

    #[test]
    fn axis_parsing_and_median() {
        assert_eq!("dwt".parse::<AblationAxis>().unwrap(), AblationAxis::DwtLevel);
        assert!("depth".parse::<AblationAxis>().is_err());
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), 0.25);
    }

    #[test]
    fn ranking_orders_by_median() {
        let row = |label: &str, m: f64| AblationRow {
            label: label.into(),
            seeds: vec![],
            accuracies: vec![],
            median_accuracy: m,
            reports: vec![],
        };
        let t = AblationTable {
            axis: AblationAxis::Modules,
            rows: vec![row("a", 0.5), row("b", 0.9), row("c", 0.7)],
        };
        let order: Vec<&str> = t.ranked().iter().map(|r| r.label.as_str()).collect();
        assert_eq!(order, ["b", "c", "a"]);
        assert!(t.to_csv().contains("modules,b,median,0.9,"));
    }
}
