use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use amsf_core::datasets::{generate_synthetic, load_gray, preprocess, save_gray, SyntheticRecipe};
use amsf_core::episodes::{split_by_patient, DatasetManifest, Split, SplitRatios};
use amsf_core::harness::{self, AblationAxis, Checkpoint, LoadedData, RunConfig};
use amsf_core::wavelet::{self, Subband};

#[derive(Parser)]
#[command(name = "amsf", version, about = "Spatial-frequency fusion network for few-shot image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides).context("loading configuration")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG images plus manifest.csv).
    Generate {
        /// Built-in recipe name (default, frequency, level3) or a TOML recipe file.
        #[arg(long, default_value = "default")]
        recipe: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Window, crop and resize every manifest image into a new dataset root.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign patient-level train/val/test splits to a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "5:3:2")]
        ratios: SplitRatios,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Episodic training; writes metrics.csv, summary.json and model.ckpt.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes report.json, confusion.csv and episodes.csv.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every point of an ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// modules, insertion or dwt_level.
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write pooled features per item as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Export at most this many items; all by default.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-level subband energies of one image, optionally saving the bands.
    InspectDwt {
        image: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.header.model != cfg.model {
        log::info!("using the model configuration stored in the checkpoint");
    }
    Ok(ck)
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<LoadedData> {
    let mut policy = cfg.preprocess;
    policy.size = cfg.model.image_size;
    LoadedData::load(&cfg.data, &policy).context("loading dataset")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { recipe, seed, out } => {
            let mut r = if recipe.ends_with(".toml") {
                let text = std::fs::read_to_string(&recipe).with_context(|| format!("reading {recipe}"))?;
                toml::from_str(&text)?
            } else {
                SyntheticRecipe::named(&recipe)?
            };
            if let Some(s) = seed {
                r.seed = s;
            }
            let m = generate_synthetic(&r, &out)?;
            println!("wrote {} images to {}", m.len(), out.display());
        }
        Command::Preprocess { cfg, out } => {
            let cfg = cfg.load()?;
            let manifest = DatasetManifest::read(&cfg.data.manifest)?;
            let root = cfg.data.image_root();
            for item in &manifest.items {
                let img = load_gray(&root.join(&item.relative_path))?;
                let p = preprocess(&img, &cfg.preprocess)
                    .with_context(|| format!("preprocessing {}", item.item_id))?;
                save_gray(&out.join(&item.relative_path), &p)?;
            }
            manifest.write(&out.join("manifest.csv"))?;
            println!("preprocessed {} images into {}", manifest.len(), out.display());
        }
        Command::Split {
            manifest,
            ratios,
            seed,
            out,
        } => {
            let m = split_by_patient(&DatasetManifest::read(&manifest)?, ratios, seed)?;
            m.write(out.as_deref().unwrap_or(&manifest))?;
            for s in Split::ALL {
                println!("{s}: {} items, {} patients", m.indices(s).len(), m.patients_in(s).len());
            }
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let outcome = harness::train(&cfg, &data, Some(&out))?;
            harness::train::write_artifacts(&outcome, &cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::Eval { cfg, checkpoint, out } => {
            let mut cfg = cfg.load()?;
            let ck = load_checkpoint(&checkpoint, &cfg)?;
            cfg.model = ck.header.model.clone();
            let data = load_data(&cfg)?;
            let report = harness::evaluate(&ck.net, &data, &cfg.eval, &ck.header.fingerprint)?;
            println!(
                "accuracy {:.4} +- {:.4} over {} episodes",
                report.accuracy, report.ci95, report.episodes
            );
            if let Some(dir) = out {
                write(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
                write(&dir.join("confusion.csv"), &report.confusion_csv())?;
                let mut ep = String::from("episode,accuracy\n");
                for (i, a) in report.episode_accuracies.iter().enumerate() {
                    ep.push_str(&format!("{},{a}\n", i + 1));
                }
                write(&dir.join("episodes.csv"), &ep)?;
            }
        }
        Command::Ablate { cfg, axis, seeds, out } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let table = harness::run_ablation(axis, &cfg, &data, &seeds)?;
            write(&out.join("ablation.csv"), &table.to_csv())?;
            write(&out.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
            for r in table.ranked() {
                println!("{:<24} median {:.4}", r.label, r.median_accuracy);
            }
        }
        Command::ExportEmbeddings {
            cfg,
            checkpoint,
            split,
            count,
            out,
        } => {
            let mut cfg = cfg.load()?;
            let ck = load_checkpoint(&checkpoint, &cfg)?;
            cfg.model = ck.header.model.clone();
            let data = load_data(&cfg)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let f = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let n = harness::export_embeddings(&ck.net, &data, split, count.unwrap_or(usize::MAX), f)?;
            println!("wrote {n} embeddings to {}", out.display());
        }
        Command::InspectDwt { image, levels, out } => {
            let img = load_gray(&image)?;
            let dec = wavelet::decompose(img.view(), levels)?;
            let total: f64 = img.iter().map(|v| v * v).sum();
            println!("image {:?}, energy {total:.6}", img.dim());
            for l in 1..=dec.num_levels() {
                let bands = dec.pyramid.level(l);
                for b in [Subband::Ll, Subband::Lh, Subband::Hl, Subband::Hh] {
                    let e: f64 = bands.band(b).iter().map(|v| v * v).sum();
                    println!("level {l} {:<2} {:?} energy {e:.6}", b.name(), bands.dim());
                }
                if let Some(dir) = &out {
                    for b in Subband::DIRECTIONS {
                        let map = dec.directional[l - 1].get(b);
                        let max = map.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
                        let vis = map.mapv(|v| 0.5 + 0.5 * v / max);
                        save_gray(&dir.join(format!("L{l}_{}.png", b.name())), &vis)?;
                    }
                }
            }
            if let Some(dir) = &out {
                save_gray(&dir.join("low_pass.png"), &dec.low_pass)?;
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
