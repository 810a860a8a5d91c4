//! `partseg` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{RunConfig, KEYS};
use crate::data::{generate_synthetic, load_manifest, load_samples, read_image, write_label, Sample};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::harness::{
    ablation_gamma, ablation_lambda, ablation_table, check_config_hash, decode, evaluate, load_checkpoint, run_trainer,
    AblationRow, AblationSetup, EvalOptions, Protocol, RunOutputs, Trainer,
};
use crate::metrics::MetricReport;
use crate::model::PartSegModel;
use crate::taxonomy::Taxonomy;

fn keys_help() -> String {
    let mut s = String::from("Config keys (set in --config files or with --set KEY=VALUE):\n");
    for (k, d) in KEYS {
        s += &format!("  {k:<26} {d}\n");
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "partseg", version, about = "Open-vocabulary part segmentation toolkit", after_help = keys_help())]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, env = "PARTSEG_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Shorthand for `--set train.seed=N --set synth.seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Shorthand for `--set eval.protocol=P`.
    #[arg(long, global = true, value_parser = ["pred_all", "oracle_obj"])]
    pub protocol: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Taxonomy tools.
    #[command(subcommand, after_help = keys_help())]
    Taxonomy(TaxonomyCommand),
    /// Synthetic dataset tools.
    #[command(subcommand, after_help = keys_help())]
    Synth(SynthCommand),
    /// Train on `data.dir` and write logs and checkpoints to the output directory.
    #[command(after_help = keys_help())]
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint written under a different config.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Evaluate a checkpoint on a split of `data.dir`.
    #[command(after_help = keys_help())]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val", value_parser = ["train", "val"])]
        split: String,
    },
    /// Predict a label map for one image (Pred-All decoding).
    #[command(after_help = keys_help())]
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Category taxonomy; defaults to `data.dir/taxonomy.json`.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    #[command(after_help = keys_help())]
    Losscheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Ablation sweeps.
    #[command(subcommand, after_help = keys_help())]
    Ablate(AblateCommand),
}

#[derive(Subcommand, Debug)]
pub enum TaxonomyCommand {
    /// Check a taxonomy file or a bundled table.
    #[command(after_help = keys_help())]
    Validate {
        /// Taxonomy JSON file.
        #[arg(long, conflicts_with = "builtin")]
        file: Option<PathBuf>,
        /// Bundled table.
        #[arg(long, value_parser = ["pascal-part-116", "ade20k-part-234"])]
        builtin: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum SynthCommand {
    /// Write the synthetic benchmark to the output directory.
    #[command(after_help = keys_help())]
    Generate,
}

#[derive(Subcommand, Debug)]
pub enum AblateCommand {
    /// Train and evaluate once per threshold.
    #[command(after_help = keys_help())]
    Gamma {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
        gammas: Vec<f64>,
    },
    /// Train and evaluate the five loss-weight settings.
    #[command(after_help = keys_help())]
    Lambda,
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn effective_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut overrides = g.set.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("train.seed={s}"));
        overrides.push(format!("synth.seed={s}"));
    }
    if let Some(p) = &g.protocol {
        overrides.push(format!("eval.protocol={p}"));
    }
    RunConfig::load(g.config.as_deref(), &overrides)
}

fn out_dir(g: &GlobalArgs) -> Result<PathBuf> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.render());
    fs::write(dir.join("config.cfg"), &text)?;
    print!("{text}");
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<(Taxonomy, Vec<Sample>)> {
    let taxonomy = Taxonomy::load(cfg.data.dir.join("taxonomy.json"))?;
    let manifest = if split == "train" { cfg.data.train_manifest() } else { cfg.data.val_manifest() };
    let samples = load_samples(&load_manifest(manifest)?, &taxonomy)?;
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    Ok((taxonomy, samples))
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions { attn: Some(cfg.train.attn), ..cfg.eval.clone() }
}

#[derive(Serialize)]
struct TaxonomySummary {
    pairs: usize,
    objects: usize,
    parts: usize,
    seen_pairs: usize,
    unseen_pairs: usize,
    unseen_objects: Vec<String>,
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Taxonomy(TaxonomyCommand::Validate { file, builtin }) => {
            let t = match (file, builtin.as_deref()) {
                (Some(f), _) => Taxonomy::load(f)?,
                (None, Some("ade20k-part-234")) => Taxonomy::ade20k_part_234(),
                (None, _) => Taxonomy::pascal_part_116(),
            };
            t.validate().map_err(Error::MalformedCategoryName)?;
            let (seen, unseen) = t.split_indices();
            let summary = TaxonomySummary {
                pairs: t.num_pairs(),
                objects: t.num_objects(),
                parts: t.num_parts(),
                seen_pairs: seen.len(),
                unseen_pairs: unseen.len(),
                unseen_objects: t.unseen_objects().iter().cloned().collect(),
            };
            println!(
                "ok: {} object-specific parts, {} objects, {} generalized parts ({} seen / {} unseen pairs)",
                summary.pairs, summary.objects, summary.parts, summary.seen_pairs, summary.unseen_pairs
            );
            if let Some(dir) = &g.out {
                fs::create_dir_all(dir)?;
                write_json(&dir.join("taxonomy_summary.json"), &summary)?;
            }
            Ok(())
        }
        Command::Synth(SynthCommand::Generate) => {
            let cfg = effective_config(g)?;
            let dir = out_dir(g)?;
            let ds = generate_synthetic(&cfg.synth, &dir)?;
            println!(
                "wrote {} train and {} val samples ({} categories) to {}",
                ds.train.len(),
                ds.val.len(),
                ds.taxonomy.num_pairs(),
                dir.display()
            );
            Ok(())
        }
        Command::Train { resume, allow_config_mismatch } => {
            let cfg = effective_config(g)?;
            let dir = out_dir(g)?;
            echo_config(&cfg, &dir)?;
            let (taxonomy, train) = load_split(&cfg, "train")?;
            let val = load_split(&cfg, "val").ok().map(|(_, v)| v);
            let model = PartSegModel::new(cfg.model)?;
            let mut trainer = Trainer::new(model, cfg.train.clone(), &taxonomy, &train)?;
            if let Some(path) = resume {
                let ckpt = load_checkpoint(path)?;
                check_config_hash(&ckpt, &cfg.hash(), *allow_config_mismatch)?;
                trainer.resume(ckpt);
            }
            let opts = eval_options(&cfg);
            let outputs = RunOutputs { dir: Some(dir.clone()), config_hash: cfg.hash() };
            let outcome = run_trainer(&mut trainer, &taxonomy, val.as_deref().map(|v| (v, &opts)), &outputs)?;
            if let Some(last) = outcome.reports.last() {
                println!("step {} L_all {:.5} L_mask {:.5}", last.step, last.l_all, last.l_mask);
            }
            if let Some(v) = &val {
                let report = evaluate(&outcome.model, v, &taxonomy, &opts)?;
                write_json(&dir.join(format!("metrics_{}.json", opts.protocol)), &report)?;
                print!("{}", report.table());
            }
            if let Some((step, h)) = outcome.best {
                println!("best validation harmonic mIoU {:.4} at step {step}", h);
            }
            Ok(())
        }
        Command::Eval { checkpoint, split } => {
            let cfg = effective_config(g)?;
            let dir = out_dir(g)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let (taxonomy, samples) = load_split(&cfg, split)?;
            let opts = eval_options(&cfg);
            let report = evaluate(&ckpt.model, &samples, &taxonomy, &opts)?;
            write_json(&dir.join(format!("metrics_{}.json", opts.protocol)), &report)?;
            println!("protocol {} on {} samples", opts.protocol, report.samples);
            print!("{}", report.table());
            Ok(())
        }
        Command::Infer { checkpoint, image, taxonomy } => {
            let cfg = effective_config(g)?;
            let dir = out_dir(g)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let tax = Taxonomy::load(taxonomy.clone().unwrap_or_else(|| cfg.data.dir.join("taxonomy.json")))?;
            let img = read_image(image)?;
            let out = ckpt.model.forward(&img, &tax)?;
            let dummy = Sample {
                id: String::new(),
                image: img,
                label: crate::metrics::LabelGrid::zeros(out.mask_logits.dim().1, out.mask_logits.dim().2),
                object_label: crate::metrics::LabelGrid::zeros(out.mask_logits.dim().1, out.mask_logits.dim().2),
            };
            let pred = decode(&out, &dummy, &tax, Protocol::PredAll)?;
            let stem = image.file_stem().map_or("pred".into(), |s| s.to_string_lossy().into_owned());
            let path = dir.join(format!("{stem}_pred.png"));
            write_label(&path, &pred)?;
            let mut counts = std::collections::BTreeMap::new();
            for &v in pred.0.iter() {
                let name = if v == 0 { "background".to_string() } else { tax.obj_part_names()[v as usize - 1].clone() };
                *counts.entry(name).or_insert(0usize) += 1;
            }
            write_json(&dir.join(format!("{stem}_pred.json"), ), &counts)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Losscheck { instances } => {
            let cfg = effective_config(g)?;
            let results = gradcheck::run_suite(*instances, cfg.train.seed);
            print!("{}", gradcheck::render_table(&results));
            if let Some(dir) = &g.out {
                fs::create_dir_all(dir)?;
                write_json(&dir.join("losscheck.json"), &results)?;
            }
            if results.iter().all(|r| r.passed()) {
                Ok(())
            } else {
                Err(Error::NonFiniteLoss { step: 0, detail: "gradient check failed".into() })
            }
        }
        Command::Ablate(which) => {
            let cfg = effective_config(g)?;
            let dir = out_dir(g)?;
            echo_config(&cfg, &dir)?;
            let (taxonomy, train) = load_split(&cfg, "train")?;
            let (_, val) = load_split(&cfg, "val")?;
            let setup = AblationSetup {
                model: cfg.model,
                train: cfg.train.clone(),
                taxonomy: &taxonomy,
                train_samples: &train,
                val_samples: &val,
                eval: cfg.eval.clone(),
            };
            let (name, title, rows): (&str, &str, Vec<AblationRow>) = match which {
                AblateCommand::Gamma { gammas } => ("ablation_gamma", "gamma", ablation_gamma(&setup, gammas)?),
                AblateCommand::Lambda => ("ablation_lambda", "setting", ablation_lambda(&setup)?),
            };
            let table = ablation_table(title, &rows);
            fs::write(dir.join(format!("{name}.txt")), &table)?;
            write_json(&dir.join(format!("{name}.json")), &rows)?;
            print!("{table}");
            Ok(())
        }
    }
}

/// Metric report of a checkpoint on `samples`; used by tests and scripts.
pub fn evaluate_checkpoint(path: &Path, samples: &[Sample], taxonomy: &Taxonomy, opts: &EvalOptions) -> Result<MetricReport> {
    evaluate(&load_checkpoint(path)?.model, samples, taxonomy, opts)
}
