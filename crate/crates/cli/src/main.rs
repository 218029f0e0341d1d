mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{resolve, Profile, RunConfig};
use pointcon::evaluation::{
    export_embeddings, feature_set, fewshot, probe_checkpoint, read_results, write_results, FewShotConfig, ProbeReport,
    Protocol, ResultRow, Standardizer,
};
use pointcon::geometry::PointCloud;
use pointcon::synthdata::{build_dataset, load_dataset, Split};
use pointcon::training::{load_checkpoint, pretrain, run_ablation, Knob, SweepSpec, RESULTS_FILE};
use pointcon::{Error, Result};

#[derive(Parser)]
#[command(name = "pointcon", version, about = "Masked contrastive pretraining for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; overrides `[data] path`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        augment: Option<String>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        sharing: Option<String>,
        #[arg(long)]
        positive_pair: Option<String>,
        #[arg(long)]
        profile: Option<String>,
    },
    /// Evaluate a checkpoint with one transfer protocol.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "linear")]
        protocol: String,
        /// Supplies the `[probe]` section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Results table to append to; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Few-shot episodes on frozen features.
    Fewshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        way: usize,
        #[arg(long, default_value_t = 10)]
        shot: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one configuration knob.
    Ablate {
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write frozen features as label-prefixed rows.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, test or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
}

fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config { .. } => ("config", 2),
        Error::Io { .. } => ("io", 3),
        Error::Format { .. } => ("format", 1),
        Error::InvalidArgument(_) => ("invalid_argument", 1),
        Error::InvalidInput(_) => ("invalid_input", 1),
        Error::NonFiniteLoss { .. } => ("non_finite_loss", 1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (name, code) = category(&e);
            eprintln!("error: {name}: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let rc = resolve(config.as_deref(), None, &[])?;
            let manifest = build_dataset(&rc.data, &out)?;
            rc.echo(&out)?;
            println!(
                "wrote {} train and {} test clouds to {}",
                manifest.count(Split::Train),
                manifest.count(Split::Test),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain {
            config,
            out,
            data,
            seed,
            mask_ratio,
            tau,
            augment,
            loss,
            sharing,
            positive_pair,
            profile,
        } => {
            let profile = profile.map(|p| p.parse::<Profile>()).transpose()?;
            let mut overrides: Vec<(&str, &str, String)> = Vec::new();
            let mut flag = |section, key, v: Option<String>| {
                if let Some(v) = v {
                    overrides.push((section, key, v));
                }
            };
            flag("train", "seed", seed.map(|v| v.to_string()));
            flag("model", "mask_ratio", mask_ratio.map(|v| v.to_string()));
            flag("model", "tau", tau.map(|v| v.to_string()));
            flag("train", "augment", augment);
            flag("train", "loss", loss);
            flag("model", "sharing", sharing);
            flag("train", "positive_pair", positive_pair);
            flag("data", "path", data.map(|p| p.display().to_string()));
            let rc = resolve(config.as_deref(), profile, &overrides)?;
            let (train, _) = load_data(&rc)?;
            rc.echo(&out)?;
            let run = pretrain(&rc.model, &rc.train, &train, Some(&out), &mut |s| {
                println!("epoch {:>3}  loss {:.4}  {:.1}s", s.epoch + 1, s.mean_loss, s.seconds)
            })?;
            if let Some(path) = run.checkpoint {
                println!("checkpoint: {}", path.display());
            }
            Ok(())
        }
        Command::Probe {
            checkpoint,
            data,
            protocol,
            config,
            out,
        } => {
            let protocol: Protocol = protocol.parse().map_err(|e: Error| Error::config("protocol", e.to_string()))?;
            let rc = resolve(config.as_deref(), None, &[])?;
            let (model, store) = load_checkpoint(&checkpoint)?;
            let (train, test) = load_dataset(&data)?;
            let report = probe_checkpoint(&model, &store, &train, &test, protocol, &rc.probe)?;
            print_accuracy(&report);
            append_result(&results_path(out, &checkpoint), ResultRow::from_report("probe", protocol.name(), &report))
        }
        Command::Fewshot {
            checkpoint,
            data,
            way,
            shot,
            trials,
            queries,
            seed,
            config,
            out,
        } => {
            let rc = resolve(config.as_deref(), None, &[])?;
            let (model, store) = load_checkpoint(&checkpoint)?;
            let (train, test) = load_dataset(&data)?;
            let tr = feature_set(&model, &store, &train)?;
            let te = feature_set(&model, &store, &test)?;
            let st = Standardizer::fit(&tr.features);
            let fs = FewShotConfig {
                way,
                shot,
                queries,
                trials,
                seed,
            };
            let report = fewshot(&st.apply_set(&tr), &st.apply_set(&te), &fs, &rc.probe)?;
            print_accuracy(&report);
            append_result(
                &results_path(out, &checkpoint),
                ResultRow::from_report("fewshot", format!("{way}way{shot}shot"), &report),
            )
        }
        Command::Ablate { sweep, config, out, data } => {
            let knob: Knob = sweep.parse().map_err(|e: Error| Error::config("sweep", e.to_string()))?;
            let overrides: Vec<(&str, &str, String)> =
                data.map(|p| ("data", "path", p.display().to_string())).into_iter().collect();
            let rc = resolve(config.as_deref(), None, &overrides)?;
            let (train, test) = load_data(&rc)?;
            rc.echo(&out)?;
            let mut spec = SweepSpec::new(knob, rc.model.clone(), rc.train.clone());
            spec.seeds = rc.sweep_seeds;
            spec.probe = rc.probe.clone();
            if !rc.sweep_values.is_empty() {
                spec.values = rc.sweep_values.clone();
            }
            let rows = run_ablation(&spec, &train, &test, Some(&out), &mut |ev| {
                println!("{knob}={}  seed {}  accuracy {:.4}", ev.value, ev.seed, ev.accuracy)
            })?;
            for r in &rows {
                println!("{}\t{}\t{:.4} ± {:.4}", r.name, r.value, r.mean, r.std);
            }
            println!("results: {}", out.join(RESULTS_FILE).display());
            Ok(())
        }
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
            split,
        } => {
            let (model, store) = load_checkpoint(&checkpoint)?;
            let (train, test) = load_dataset(&data)?;
            let clouds: Vec<PointCloud> = match split.as_str() {
                "train" => train,
                "test" => test,
                "all" => train.into_iter().chain(test).collect(),
                other => return Err(Error::config("split", format!("unknown split `{other}` (expected train, test or all)"))),
            };
            let set = feature_set(&model, &store, &clouds)?;
            export_embeddings(&out, &set)?;
            println!("wrote {} rows of {} features to {}", set.len(), set.dim(), out.display());
            Ok(())
        }
    }
}

fn load_data(rc: &RunConfig) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    let path = rc
        .data_path
        .as_deref()
        .ok_or_else(|| Error::config("data.path", "no dataset directory given (set `[data] path` or pass --data)"))?;
    load_dataset(path)
}

fn print_accuracy(r: &ProbeReport) {
    println!("accuracy: {:.4} ± {:.4}", r.mean, r.std);
}

fn results_path(out: Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(RESULTS_FILE))
}

fn append_result(path: &Path, row: ResultRow) -> Result<()> {
    let mut rows = if path.exists() { read_results(path)? } else { Vec::new() };
    rows.push(row);
    write_results(path, &rows)?;
    println!("results: {}", path.display());
    Ok(())
}
