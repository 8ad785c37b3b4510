use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetsel::pipeline::{self, Mode, Pipeline, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "hetsel", version, about = "Multi-view multi-label feature selection")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a dataset manifest.
    Ingest(RunArgs),
    /// Compute (or reuse cached) mutual-information matrices.
    Stats(RunArgs),
    /// Score feature/view/label descriptions for semantic relevance.
    Semantic(RunArgs),
    /// Build the heterogeneous graph.
    Graph(RunArgs),
    /// Train the graph attention network on the saved graph.
    Train(RunArgs),
    /// Rank features from saved scores at every selection ratio.
    Select(RunArgs),
    /// Evaluate saved scores and the baselines with ML-kNN.
    Eval(RunArgs),
    /// Run every stage for the configured mode.
    Run(RunArgs),
    /// Tables and charts across finished runs.
    Report {
        /// Run output directories.
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

/// Flags override values from `--config`. The LLM API key is read from the
/// environment variable named by `llm.api_key_env` (default
/// `HETSEL_LLM_API_KEY`).
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// statistical, semantic-mock, semantic-llm or ablation-halfdata.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// GAT initialization and negative-sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Split seed of the first repeat.
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated selection ratios, e.g. 0.02,0.1,0.2.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    bins: Option<u32>,
    /// Skip the random and max-MI baselines.
    #[arg(long)]
    no_baselines: bool,
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.manifest {
            c.manifest = v.clone();
        }
        if let Some(v) = self.mode {
            c.mode = v;
        }
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
        }
        if let Some(v) = self.base_seed {
            c.protocol.base_seed = v;
        }
        if let Some(v) = self.repeats {
            c.protocol.repeats = v;
        }
        if let Some(v) = &self.ratios {
            c.protocol.ratios = v.clone();
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.bins {
            c.bins = v;
        }
        if self.no_baselines {
            c.baselines = false;
        }
        if let Some(v) = &self.llm_endpoint {
            c.llm.endpoint = v.clone();
        }
        if let Some(v) = &self.llm_model {
            c.llm.model = v.clone();
        }
        Ok(c)
    }
}

fn semantic_scores(p: &Pipeline, loaded: &pipeline::Loaded) -> Result<Option<hetsel::semantic::SemanticScoreSet>, PipelineError> {
    if !p.uses_semantics() {
        return Ok(None);
    }
    match p.load_semantic()? {
        Some(s) => Ok(Some(s)),
        None => p.semantic(loaded).map(Some),
    }
}

fn report(runs: &[PathBuf], out: &std::path::Path) -> Result<(), PipelineError> {
    let r = pipeline::report(runs, out)?;
    println!("methods: {}", r.methods.join(", "));
    for path in r.tables.iter().chain(&r.charts) {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    let (name, args) = match command {
        Command::Ingest(a) => ("ingest", a),
        Command::Stats(a) => ("stats", a),
        Command::Semantic(a) => ("semantic", a),
        Command::Graph(a) => ("graph", a),
        Command::Train(a) => ("train", a),
        Command::Select(a) => ("select", a),
        Command::Eval(a) => ("eval", a),
        Command::Run(a) => ("run", a),
        Command::Report { runs, out } => return report(&runs, &out),
    };
    let p = Pipeline::new(args.config()?)?;
    let out = p.config.output_dir.clone();
    match name {
        "ingest" => {
            let l = p.ingest()?;
            println!("dataset digest {}", l.digest);
        }
        "stats" => {
            let l = p.ingest()?;
            let (_, cached) = p.stats(&l)?;
            println!("MI matrices {}", if cached { "reused from cache" } else { "computed" });
        }
        "semantic" => {
            if !p.uses_semantics() {
                return Err(PipelineError::Config(format!("mode {} uses no semantic scores", p.config.mode.name())));
            }
            let l = p.ingest()?;
            println!("{} semantic scores", p.semantic(&l)?.len());
        }
        "graph" => {
            let l = p.ingest()?;
            let (mi, _) = p.stats(&l)?;
            let sem = semantic_scores(&p, &l)?;
            let (g, _) = p.graph(&l, &mi, sem.as_ref())?;
            p.write_graph(&out, &g)?;
            println!("graph with {} edges", g.edge_count());
        }
        "train" => {
            let g = pipeline::load_graph(&out)?;
            let outcome = p.train(&g)?;
            p.write_training(&out, &g, &outcome)?;
            println!("loss {:.6} -> {:.6}", outcome.report.initial_loss(), outcome.report.best_loss());
        }
        "select" => {
            let l = p.ingest()?;
            let selections = p.select(&l, &pipeline::load_scores(&out)?)?;
            for s in selections {
                println!("ratio {} k {}: {:?}", s.ratio, s.k, s.selected);
            }
        }
        "eval" => {
            let l = p.ingest()?;
            let scores = pipeline::load_scores(&out)?;
            let (mi, _) = p.stats(&l)?;
            let mut reports = vec![p.evaluate_method(&l, scores)?];
            reports.extend(p.evaluate_baselines(&l, &mi)?);
            print_reports(&reports);
        }
        _ => {
            let summary = p.run()?;
            print_reports(&summary.reports);
            println!("artifacts in {}", out.display());
        }
    }
    Ok(())
}

fn print_reports(reports: &[hetsel::eval::EvalReport]) {
    println!("{:<28} {:>8} {:>8} {:>8} {:>8}", "method (mean over ratios)", "AP", "AUC", "LRAP", "HL");
    for r in reports {
        let m = r.over_ratio_mean;
        println!("{:<28} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", r.method, m.ap, m.auc, m.lrap, m.hl);
    }
}
