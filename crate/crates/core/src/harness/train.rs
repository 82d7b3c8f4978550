//! Episodic training loop with warm-up and step decay, periodic validation,
//! best-validation retention, and a diagnostic dump on non-finite loss.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::augment;
use crate::episodes::{EpisodeSampler, Split};
use crate::error::{Error, Result};
use crate::model::{AmsfNet, EpisodeImages, PreparedImage};

use super::checkpoint::Checkpoint;
use super::config::{EvalConfig, RunConfig};
use super::data::LoadedData;
use super::eval::evaluate;
use super::optim::{AdamW, Schedule};

/// One row of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub fingerprint: String,
    pub episodes: usize,
    pub num_params: usize,
    /// Episode whose parameters were kept.
    pub best_episode: usize,
    pub best_val_accuracy: Option<f64>,
    /// How the kept parameters were chosen.
    pub selection: String,
    pub final_loss: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters, or the final ones without validation.
    pub best: Checkpoint,
    pub final_net: AmsfNet,
    pub history: Vec<EpisodeRecord>,
    pub summary: TrainSummary,
}

#[derive(Serialize)]
struct NanDump<'a> {
    episode: usize,
    lr: f64,
    loss: f64,
    recent: &'a [EpisodeRecord],
    params: Vec<ParamStat>,
}

#[derive(Serialize)]
struct ParamStat {
    name: String,
    max_abs: f64,
    finite: bool,
}

fn schedule(cfg: &RunConfig) -> Schedule {
    Schedule {
        base_lr: cfg.train.lr,
        warmup: cfg.train.warmup,
        milestones: cfg.train.milestones.clone(),
        decay: cfg.train.decay,
    }
}

/// Validation settings, or the reason validation is skipped.
fn validation_plan(cfg: &RunConfig, data: &LoadedData) -> std::result::Result<EvalConfig, String> {
    if cfg.train.val_every == 0 || cfg.train.val_episodes == 0 {
        return Err("validation disabled".into());
    }
    if data.manifest.indices(Split::Val).is_empty() {
        return Err("no validation split".into());
    }
    let v = EvalConfig {
        n_way: cfg.eval.n_way,
        k_shot: cfg.eval.k_shot,
        n_query: cfg.eval.n_query,
        episodes: cfg.train.val_episodes,
        seed: cfg.eval.seed,
        split: Split::Val,
    };
    EpisodeSampler::new(&data.manifest, Split::Val, v.n_way, v.k_shot, v.n_query)
        .map(|_| v)
        .map_err(|e| format!("validation infeasible: {e}"))
}

fn prepare_augmented(
    net: &AmsfNet,
    data: &LoadedData,
    idx: &[usize],
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreparedImage>> {
    idx.iter()
        .map(|&i| {
            let img = augment(&data.images[i], rng, &cfg.train.augment);
            net.prepare(img.view())
        })
        .collect()
}

fn dump_state(dir: &Path, net: &AmsfNet, fingerprint: &str, episode: usize, lr: f64, loss: f64, history: &[EpisodeRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let recent = &history[history.len().saturating_sub(20)..];
    let params = net
        .store
        .iter()
        .map(|(_, name, v)| ParamStat {
            name: name.to_string(),
            max_abs: v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
            finite: v.iter().all(|x| x.is_finite()),
        })
        .collect();
    let dump = NanDump {
        episode,
        lr,
        loss,
        recent,
        params,
    };
    let path = dir.join("nan_dump.json");
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
    Checkpoint::new(net.clone(), fingerprint, episode - 1, None).save(&dir.join("nan_dump.ckpt"))
}

/// Trains from a fresh initialization seeded by `train.seed`. When the loss
/// turns non-finite the run aborts; with `dump_dir` set, the state before the
/// failing step is written there first.
pub fn train(cfg: &RunConfig, data: &LoadedData, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let tc = &cfg.train;
    let fingerprint = cfg.fingerprint();
    let mut net = AmsfNet::new(cfg.model.clone(), tc.seed)?;
    let sched = schedule(cfg);
    let mut opt = AdamW::new(&net.store, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    if let Some(head) = &net.params.head {
        for id in head.params() {
            opt.set_lr_scale(id, tc.head_lr_scale);
        }
    }

    let sampler = (tc.episodes > 0)
        .then(|| EpisodeSampler::new(&data.manifest, Split::Train, tc.n_way, tc.k_shot, tc.n_query))
        .transpose()?;
    let plan = validation_plan(cfg, data);
    if let Err(reason) = &plan {
        log::warn!("{reason}; keeping the final parameters");
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut episode_rng = ChaCha8Rng::seed_from_u64(seeder.gen());
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seeder.gen());
    let mut step_rng = ChaCha8Rng::seed_from_u64(seeder.gen());

    let mut history = Vec::with_capacity(tc.episodes);
    let mut best: Option<(usize, f64, AmsfNet)> = None;
    for t in 1..=tc.episodes {
        let spec = sampler.as_ref().expect("sampler exists when training").sample(&mut episode_rng)?;
        let support: Vec<Vec<PreparedImage>> = spec
            .support
            .iter()
            .map(|shots| prepare_augmented(&net, data, shots, cfg, &mut aug_rng))
            .collect::<Result<_>>()?;
        let labelled = spec.labelled_queries();
        let q_idx: Vec<usize> = labelled.iter().map(|(i, _)| *i).collect();
        let queries = prepare_augmented(&net, data, &q_idx, cfg, &mut aug_rng)?;
        let images = EpisodeImages {
            support: support.iter().map(|s| s.iter().collect()).collect(),
            queries: queries.iter().collect(),
            labels: labelled.iter().map(|(_, l)| *l).collect(),
        };
        let lr = sched.lr(t);
        let step = match net.episode_step(&images, &mut step_rng) {
            Ok(s) => s,
            Err(Error::NonFiniteLoss { loss, .. }) => {
                log::error!("non-finite loss {loss} at episode {t}");
                if let Some(dir) = dump_dir {
                    dump_state(dir, &net, &fingerprint, t, lr, loss, &history)?;
                }
                return Err(Error::NonFiniteLoss { episode: t, loss });
            }
            Err(e) => return Err(e),
        };
        opt.step(&mut net.store, &step.grads, lr);
        let mut record = EpisodeRecord {
            episode: t,
            lr,
            loss: step.loss,
            accuracy: step.correct as f64 / images.labels.len() as f64,
            val_accuracy: None,
        };
        if let Ok(v) = &plan {
            if t % tc.val_every == 0 || t == tc.episodes {
                let acc = evaluate(&net, data, v, &fingerprint)?.accuracy;
                record.val_accuracy = Some(acc);
                log::info!("episode {t}: validation accuracy {acc:.4}");
                if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                    best = Some((t, acc, net.clone()));
                }
            }
        }
        if t % 50 == 0 {
            log::info!("episode {t}: loss {:.4} acc {:.3} lr {lr:.2e}", record.loss, record.accuracy);
        }
        history.push(record);
    }

    let (best_episode, best_val, best_net, selection) = match (best, &plan) {
        (Some((t, acc, n)), _) => (t, Some(acc), n, "best validation accuracy".to_string()),
        (None, Err(reason)) => (tc.episodes, None, net.clone(), format!("final parameters ({reason})")),
        (None, Ok(_)) => (tc.episodes, None, net.clone(), "final parameters".to_string()),
    };
    let summary = TrainSummary {
        fingerprint: fingerprint.clone(),
        episodes: tc.episodes,
        num_params: net.store.num_scalars(),
        best_episode,
        best_val_accuracy: best_val,
        selection,
        final_loss: history.last().map(|r| r.loss),
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        best: Checkpoint::new(best_net, fingerprint, best_episode, best_val),
        final_net: net,
        history,
        summary,
    })
}

/// Means of consecutive non-overlapping windows of the loss curve.
pub fn window_means(history: &[EpisodeRecord], window: usize) -> Vec<f64> {
    history
        .chunks_exact(window.max(1))
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Writes `metrics.csv`, `summary.json` and `model.ckpt` into `dir`.
pub fn write_artifacts(outcome: &TrainOutcome, cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for r in &outcome.history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
    let summary = dir.join("summary.json");
    std::fs::write(&summary, serde_json::to_string_pretty(&outcome.summary)?).map_err(|e| Error::io(&summary, e))?;
    let config = dir.join("config.toml");
    std::fs::write(&config, cfg.to_toml()).map_err(|e| Error::io(&config, e))?;
    outcome.best.save(&dir.join("model.ckpt"))
}
