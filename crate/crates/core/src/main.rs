use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use useridentifier::augment::Placement;
use useridentifier::data::{gen_records, read_records, write_records, SyntheticConfig};
use useridentifier::federated::rounds_csv;
use useridentifier::harness::{
    compare_baselines, prepare_for_seed, resolve_out_dir, run_ablation, run_federated, run_one, summary_table,
    write_manifest, ExperimentConfig, Method, RunResult, RunSpec,
};
use useridentifier::identifiers::IdentifierAssignment;
use useridentifier::model::{load_checkpoint, save_checkpoint, Classifier, Mode};
use useridentifier::tokenizer::Vocabulary;
use useridentifier::trainer::{evaluate, Conditioning};
use useridentifier::{Error, Result};

#[derive(Parser)]
#[command(name = "useridentifier", version, about = "Personalized text classification with user identifiers")]
struct Cli {
    /// Experiment configuration (JSON, or TOML by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $UID_OUT_DIR, then ./runs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as JSONL.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one method.
    Train {
        /// JSONL corpus; the synthetic generator is used otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// e.g. conventional, user_adapter, untied_user_emb, user_identifier:rand_all
        #[arg(long)]
        method: Option<Method>,
    },
    /// Federated averaging over per-user clients.
    FedTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train user-agnostically instead of with identifiers.
        #[arg(long)]
        no_identifiers: bool,
    },
    /// Identifier type x length grid.
    Ablate,
    /// All configured methods on identical data.
    Compare,
    /// Evaluate a trained run on a JSONL corpus.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// What `eval` needs to rebuild a trained run's inputs.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    method: Method,
    id_len: usize,
    placement: Placement,
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let out_dir = resolve_out_dir(cli.out_dir.as_deref());
    let seed = *cfg.seeds.first().ok_or_else(|| Error::Config("no seeds configured".into()))?;
    match cli.command {
        Command::GenData { out } => {
            let out = out.unwrap_or_else(|| out_dir.join("data.jsonl"));
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            create_dir(dir)?;
            let syn = SyntheticConfig { seed: cli.seed.unwrap_or(cfg.data.synthetic.seed), ..cfg.data.synthetic.clone() };
            let (records, _) = gen_records(&syn)?;
            write_records(&out, &records)?;
            write_manifest(dir, "gen-data", &cfg, Some(syn.seed))?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train { data, method } => {
            if data.is_some() {
                cfg.data.path = data;
            }
            create_dir(&out_dir)?;
            let method = method.unwrap_or(Method::UserIdentifier(cfg.identifier.scheme));
            let id_len = if method == Method::UntiedUserEmb { cfg.untied_len } else { cfg.identifier.length };
            let spec = RunSpec { method, id_len, placement: cfg.identifier.placement };
            let prepared = prepare_for_seed(&cfg, seed)?;
            let out = match run_one(&cfg, &prepared, &spec, seed)? {
                RunResult::Done(out) => out,
                RunResult::Infeasible(why) => return Err(Error::Config(why)),
            };
            write(&out_dir.join("metrics.csv"), &out.metrics.to_csv())?;
            write(&out_dir.join("metrics.json"), &(serde_json::to_string_pretty(&out.metrics)? + "\n"))?;
            save_checkpoint(&out_dir.join("model.ckpt"), &out.model, &out.params)?;
            prepared.vocab.save(&out_dir.join("vocab.json"))?;
            if let Some(a) = &out.assignment {
                a.save_jsonl(&out_dir.join("identifiers.jsonl"))?;
            }
            let info = RunInfo { method, id_len, placement: spec.placement, seed };
            write(&out_dir.join("run.json"), &(serde_json::to_string_pretty(&info)? + "\n"))?;
            write_manifest(&out_dir, "train", &cfg, Some(seed))?;
            println!("{method}: val {:.4} test {:.4}", out.metrics.val.accuracy, out.metrics.test.accuracy);
        }
        Command::FedTrain { data, no_identifiers } => {
            if data.is_some() {
                cfg.data.path = data;
            }
            create_dir(&out_dir)?;
            let prepared = prepare_for_seed(&cfg, seed)?;
            let (model, params, reports) = run_federated(&cfg, &prepared, !no_identifiers, seed)?;
            write(&out_dir.join("rounds.csv"), &rounds_csv(&reports))?;
            save_checkpoint(&out_dir.join("model.ckpt"), &model, &params)?;
            write_manifest(&out_dir, "fed-train", &cfg, Some(seed))?;
            if let Some(last) = reports.last() {
                println!("round {}: test {:.4}", last.round, last.accuracy);
            }
        }
        Command::Ablate => {
            create_dir(&out_dir)?;
            let rows = run_ablation(&cfg, &out_dir.join("ablation.csv"))?;
            let table = summary_table(&cfg, &rows);
            write(&out_dir.join("ablation_summary.txt"), &table)?;
            write_manifest(&out_dir, "ablate", &cfg, cli.seed)?;
            print!("{table}");
        }
        Command::Compare => {
            create_dir(&out_dir)?;
            let rows = compare_baselines(&cfg, &out_dir.join("compare.csv"))?;
            let table = summary_table(&cfg, &rows);
            write(&out_dir.join("compare_summary.txt"), &table)?;
            write_manifest(&out_dir, "compare", &cfg, cli.seed)?;
            print!("{table}");
        }
        Command::Eval { run, data } => {
            eval(&run, &data, &out_dir, &cfg)?;
        }
    }
    Ok(())
}

fn eval(run: &Path, data: &Path, out_dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let info: RunInfo = {
        let path = run.join("run.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        serde_json::from_str(&text)?
    };
    let vocab = Vocabulary::load(&run.join("vocab.json"))?;
    let (model, params) = load_checkpoint(&run.join("model.ckpt"))?;
    let ident_path = run.join("identifiers.jsonl");
    let assignment = if ident_path.exists() { Some(IdentifierAssignment::load_jsonl(&ident_path)?) } else { None };
    let mut classifier = Classifier::new(model)?;
    if matches!(classifier.config.mode, Mode::Prefix { .. }) {
        classifier.set_prefix_active(true);
    }
    let samples: Vec<_> = read_records(data)?.iter().map(|r| r.encode(&vocab)).collect();
    let cls = vocab.specials().cls;
    let cond = match &assignment {
        Some(a) => Conditioning::with_identifiers(cls, a, info.placement),
        None => Conditioning::plain(cls),
    };
    let report = evaluate(&classifier, &params, &samples, &cond)?;
    create_dir(out_dir)?;
    write(&out_dir.join("eval.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_manifest(out_dir, "eval", cfg, Some(info.seed))?;
    println!("{}: accuracy {:.4} on {} samples", info.method, report.accuracy, report.n);
    Ok(())
}
