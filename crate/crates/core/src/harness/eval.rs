//! Episodic evaluation with confidence intervals and a confusion matrix.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{episode_batcher, DatasetManifest, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::{AmsfNet, PreparedImage};
use crate::similarity;

use super::config::EvalConfig;
use super::data::LoadedData;

/// Tolerance on probability row sums.
pub const PROB_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Correct predictions over all queries of all episodes.
    pub accuracy: f64,
    /// `1.96 * s / sqrt(T)` over per-episode accuracies, `s` the sample
    /// standard deviation.
    pub ci95: f64,
    pub episodes: usize,
    /// Class labels indexing the confusion matrix, sorted.
    pub classes: Vec<String>,
    /// `confusion[true][predicted]` query counts.
    pub confusion: Vec<Vec<u64>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub episode_accuracies: Vec<f64>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn total_queries(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    /// Confusion matrix as CSV with a `true\predicted` header row.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in &self.classes {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            s.push_str(c);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Mean negative log probability of the true labels.
pub fn episodic_loss(probabilities: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if probabilities.nrows() != labels.len() || probabilities.nrows() == 0 {
        return Err(Error::dim(format!(
            "{} probability rows for {} labels",
            probabilities.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, (p, &l)) in probabilities.rows().into_iter().zip(labels).enumerate() {
        let sum: f64 = p.sum();
        if (sum - 1.0).abs() > PROB_TOL || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::NotAProbability { row, sum });
        }
        if l >= p.len() {
            return Err(Error::InvalidArgument(format!("label {l} outside {} classes", p.len())));
        }
        total -= p[l].ln();
    }
    Ok(total / labels.len() as f64)
}

/// `(mean, 1.96 * sample_std / sqrt(T))`; the half-width is 0 for `T < 2`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let t = values.len();
    if t == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    if t < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
    (mean, 1.96 * var.sqrt() / (t as f64).sqrt())
}

/// Runs `cfg.episodes` episodes and aggregates predictions from `predict`,
/// which returns one predicted episode label per labelled query.
///
/// Episodes are sampled sequentially from the seeded stream, predicted in
/// parallel, and reduced in episode order.
pub fn evaluate_with<F>(manifest: &DatasetManifest, cfg: &EvalConfig, fingerprint: &str, predict: F) -> Result<EvalReport>
where
    F: Fn(&EpisodeSpec) -> Result<Vec<usize>> + Sync,
{
    let specs = episode_batcher(manifest, cfg.split, cfg.n_way, cfg.k_shot, cfg.n_query, cfg.episodes, cfg.seed)?
        .collect::<Result<Vec<_>>>()?;
    let preds = specs.par_iter().map(&predict).collect::<Result<Vec<_>>>()?;

    let classes: Vec<String> = manifest
        .indices(cfg.split)
        .into_iter()
        .map(|i| manifest.items[i].class_label.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let nc = classes.len();
    let mut confusion = vec![vec![0u64; nc]; nc];
    let mut episode_accuracies = Vec::with_capacity(specs.len());
    for (spec, pred) in specs.iter().zip(&preds) {
        let labelled = spec.labelled_queries();
        if pred.len() != labelled.len() {
            return Err(Error::dim(format!("{} predictions for {} queries", pred.len(), labelled.len())));
        }
        let mut correct = 0usize;
        for (&(_, truth), &p) in labelled.iter().zip(pred) {
            if p >= spec.n_way() {
                return Err(Error::InvalidArgument(format!("prediction {p} outside {} classes", spec.n_way())));
            }
            correct += usize::from(p == truth);
            let t = pos[spec.classes[truth].as_str()];
            let q = pos[spec.classes[p].as_str()];
            confusion[t][q] += 1;
        }
        episode_accuracies.push(correct as f64 / labelled.len() as f64);
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..nc).map(|i| confusion[i][i]).sum();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = (0..nc)
        .map(|j| ratio(confusion[j][j], (0..nc).map(|i| confusion[i][j]).sum()))
        .collect();
    let recall = (0..nc).map(|i| ratio(confusion[i][i], confusion[i].iter().sum())).collect();
    let (_, ci95) = mean_ci95(&episode_accuracies);
    Ok(EvalReport {
        accuracy: ratio(trace, total),
        ci95,
        episodes: specs.len(),
        classes,
        confusion,
        precision,
        recall,
        episode_accuracies,
        fingerprint: fingerprint.to_string(),
    })
}

/// Eval-mode feature maps for every item of the split, computed once.
pub fn split_features(net: &AmsfNet, data: &LoadedData, cfg: &EvalConfig) -> Result<BTreeMap<usize, Array2<f64>>> {
    data.manifest
        .indices(cfg.split)
        .into_par_iter()
        .map(|i| {
            let img: PreparedImage = net.prepare(data.images[i].view())?;
            Ok((i, net.features(&img)?))
        })
        .collect()
}

pub fn evaluate(net: &AmsfNet, data: &LoadedData, cfg: &EvalConfig, fingerprint: &str) -> Result<EvalReport> {
    let feats = split_features(net, data, cfg)?;
    evaluate_with(&data.manifest, cfg, fingerprint, |spec| {
        let support: Vec<Vec<&Array2<f64>>> = spec
            .support
            .iter()
            .map(|shots| shots.iter().map(|i| &feats[i]).collect())
            .collect();
        let labelled = spec.labelled_queries();
        let queries: Vec<&Array2<f64>> = labelled.iter().map(|(i, _)| &feats[i]).collect();
        let logits = net.logits_from_features(&support, &queries)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| similarity::argmax(&r.to_vec()))
            .collect())
    })
}
