//! `hahe`: dataset statistics, training, evaluation and prediction.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hahe_core::check::{gradient_check, toy_config};
use hahe_core::config::TrainConfig;
use hahe_core::eval::{
    categorize, evaluate_multi_position, parse_masked_fact, predict_tuples, FilterIndex, ModelScorer, Scorer,
    DEFAULT_BEAM, DEFAULT_KEEP,
};
use hahe_core::hkg::{is_entity_position, load_splits, split_statistics, DataFormat, Dataset};
use hahe_core::training::{load_model, run_training_on, GraphContext, LoadedModel};

#[derive(Parser)]
#[command(name = "hahe", version, about = "Hierarchical attention link prediction on hyper-relational knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset statistics: fact, qualifier, entity and relation counts.
    Stats {
        /// Directory holding train/valid/test fact files
        #[arg(long)]
        data: PathBuf,
        /// Force a file format instead of inferring it from extensions
        #[arg(long)]
        format: Option<DataFormat>,
    },
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Rank every position of a split and write reports.
    Eval(EvalArgs),
    /// Complete a fact with one `?` slot.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        /// Fact tokens `s r o [a v]*` with exactly one `?`
        #[arg(long)]
        fact: String,
        /// Number of completions to print
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        json: bool,
    },
    /// Jointly complete a fact with two or more `?` slots.
    MultiPredict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        fact: String,
        /// Candidates kept per masked slot
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
        /// Joint tuples kept
        #[arg(long, default_value_t = DEFAULT_KEEP)]
        keep: usize,
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic and finite-difference gradients on a toy model.
    Gradcheck {
        /// Config file overriding the toy defaults
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, the metric log and the resolved config
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_global: bool,
    #[arg(long)]
    no_node_bias: bool,
    #[arg(long)]
    no_edge_bias: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Override any config key, e.g. `--set embedding_dim=64`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress per-epoch progress
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data directory; defaults to the one recorded in the checkpoint
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "test")]
    split: String,
    /// Unfiltered ranking
    #[arg(long, conflicts_with = "filtered")]
    raw: bool,
    /// Filtered ranking (default)
    #[arg(long)]
    filtered: bool,
    /// Directory for report.json, report.txt and breakdown.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run joint prediction with this many masked slots (2 or 3); repeatable
    #[arg(long = "multi", value_name = "K")]
    multi: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    #[arg(long, default_value_t = DEFAULT_KEEP)]
    keep: usize,
    /// Filter other known tuples out of joint rankings
    #[arg(long)]
    filter_tuples: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("error[usage] {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<hahe_core::Error>())
                .map_or("failed", |c| c.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}] {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats { data, format } => stats(&data, format),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Predict { model, fact, top, json } => predict(&model, &fact, top, json),
        Command::MultiPredict {
            model,
            fact,
            beam,
            keep,
            json,
        } => multi_predict(&model, &fact, beam, keep, json),
        Command::Gradcheck {
            config,
            seed,
            corrupt_gradient,
        } => gradcheck(config.as_deref(), seed, corrupt_gradient),
    }
}

fn stats(data: &Path, format: Option<DataFormat>) -> Result<()> {
    let splits = load_splits(data, format).with_context(|| format!("loading {}", data.display()))?;
    let stats = split_statistics(&splits);
    println!("{stats}");
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
        config.set(k.trim(), v)?;
    }
    config.no_global |= args.no_global;
    config.no_node_bias |= args.no_node_bias;
    config.no_edge_bias |= args.no_edge_bias;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    let splits = load_splits(&args.data, None).with_context(|| format!("loading {}", args.data.display()))?;
    let dataset = Dataset::from_splits(&splits, config.seed)?;
    let quiet = args.quiet;
    let outcome = run_training_on(config, &dataset, &args.data.display().to_string(), &args.out, |epoch, s| {
        if !quiet {
            eprintln!("epoch {epoch} loss {:.6} ({:.0} samples/s)", s.mean_loss, s.throughput());
        }
    })?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    if let Some(mrr) = outcome.best_valid_mrr {
        println!("best validation all-entity MRR: {mrr:.6}");
    }
    Ok(())
}

struct Session {
    loaded: LoadedModel,
    dataset: Dataset,
    graph: GraphContext,
}

impl Session {
    fn open(args: &ModelArgs) -> Result<Self> {
        let loaded = load_model(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
        let dataset = loaded.dataset(args.data.as_deref())?;
        let graph = loaded.graph(&dataset)?;
        Ok(Session { loaded, dataset, graph })
    }

    fn scorer(&self) -> Result<ModelScorer<'_>> {
        Ok(ModelScorer::new(
            &self.loaded.model,
            &self.loaded.vocab,
            self.graph.global.as_ref(),
            self.loaded.config.batch_size,
        )?)
    }

    fn label(&self, position: usize, id: usize) -> &str {
        let v = &self.loaded.vocab;
        let l = if is_entity_position(position) { v.entity_label(id) } else { v.relation_label(id) };
        l.unwrap_or("<unknown>")
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let session = Session::open(&args.model)?;
    let Some(facts) = session.dataset.split(&args.split) else {
        bail!("unknown split {:?} (train, valid or test)", args.split);
    };
    if facts.is_empty() {
        bail!("split {:?} is empty", args.split);
    }
    let filter = (!args.raw).then(|| FilterIndex::build(session.dataset.all_facts()));
    let scorer = session.scorer()?;
    let report = hahe_core::eval::evaluate_link_prediction(
        &scorer,
        facts,
        filter.as_ref(),
        &session.graph.hypergraph,
        session.loaded.config.batch_size,
    )?;
    print!("{report}");
    let known: Vec<_> = session.dataset.all_facts().cloned().collect();
    let mut multi = Vec::new();
    for &k in &args.multi {
        let r = evaluate_multi_position(&scorer, facts, k, args.beam, args.keep, args.filter_tuples.then_some(&known[..]))?;
        print!("\n{r}");
        multi.push(r);
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let write = |name: &str, text: String| -> Result<()> {
            let p = out.join(name);
            fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
        };
        write("report.json", report.to_json()?)?;
        write("report.txt", report.to_string())?;
        write("breakdown.csv", report.to_csv())?;
        if !multi.is_empty() {
            write("multi.json", serde_json::to_string_pretty(&multi)?)?;
            write("multi.txt", multi.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("\n"))?;
        }
    }
    Ok(())
}

fn predict(args: &ModelArgs, text: &str, top: usize, json: bool) -> Result<()> {
    let session = Session::open(args)?;
    let (fact, masked) = parse_masked_fact(text, &session.loaded.vocab)?;
    if masked.len() != 1 {
        bail!("predict needs exactly one `?`, found {}", masked.len());
    }
    let p = masked[0];
    let scores = session.scorer()?.score(&[(&fact, &masked)])?;
    let lp = &scores[0][0];
    let mut order: Vec<usize> = (0..lp.len()).collect();
    order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    order.truncate(top);
    if json {
        let rows: Vec<_> = order
            .iter()
            .map(|&c| serde_json::json!({ "label": session.label(p, c), "probability": lp[c].exp() }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        for (i, &c) in order.iter().enumerate() {
            println!("{:>3}  {:.6}  {}", i + 1, lp[c].exp(), session.label(p, c));
        }
    }
    Ok(())
}

fn multi_predict(args: &ModelArgs, text: &str, beam: usize, keep: usize, json: bool) -> Result<()> {
    let session = Session::open(args)?;
    let (fact, masked) = parse_masked_fact(text, &session.loaded.vocab)?;
    if masked.len() < 2 {
        bail!("multi-predict needs at least two `?`, found {}", masked.len());
    }
    let (where_, kind) = categorize(&masked);
    let tuples = predict_tuples(&session.scorer()?, &fact, &masked, beam, keep)?;
    let labels = |t: &[usize]| -> Vec<String> { masked.iter().zip(t).map(|(&p, &c)| session.label(p, c).to_string()).collect() };
    if json {
        let rows: Vec<_> = tuples
            .iter()
            .map(|t| serde_json::json!({ "tuple": labels(&t.elements), "probability": t.probability() }))
            .collect();
        let out = serde_json::json!({
            "positions": masked,
            "category": { "type": kind, "where": where_ },
            "tuples": rows,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("category: {kind} {where_}");
        for (i, t) in tuples.iter().enumerate() {
            println!("{:>3}  {:.6e}  {}", i + 1, t.probability(), labels(&t.elements).join("\t"));
        }
    }
    Ok(())
}

fn gradcheck(config: Option<&Path>, seed: u64, corrupt: bool) -> Result<()> {
    let mut cfg = toy_config();
    if let Some(path) = config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_str(&text)?;
    }
    let rows = gradient_check(&cfg, seed, corrupt)?;
    println!("{:<28} {:>8} {:>12}  result", "parameter", "elements", "max rel err");
    for r in &rows {
        println!(
            "{:<28} {:>8} {:>12.3e}  {}",
            r.name,
            r.elements,
            r.max_relative_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    println!("gradcheck: all {} parameter groups pass", rows.len());
    Ok(())
}
