use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use entret_core::corpus::{load_queries, save_queries};
use entret_core::eval::{compare_systems, load_results, save_results, CompareMode, Metric, QueryResult};
use entret_core::pipeline::{
    bm25_index, build_index, query_holdout, run_ablation, run_bm25, run_queries, train_projection, AblationConfig,
    ProjectionSetup,
};
use entret_core::projection::{TrainConfig, TripletConfig, TypeSplit};
use entret_core::represent::{load_dump, synth_generate, LoadOptions, SynthConfig};
use entret_core::sweep::{depth_csv, heatmap_csv, run_sweep, PairConfig};
use entret_core::{Bm25Params, Corpus, MentionToken, ProjectionModel, RepresentationKey, TypeQuery, VectorIndex};

#[derive(Parser, Serialize)]
#[command(
    name = "entret",
    version,
    about = "Zero-shot entity retrieval from intermediate representations"
)]
struct Cli {
    /// Worker threads; falls back to NR_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Check a corpus, and optionally a dump and a query file against it.
    Validate(ValidateArgs),
    /// Write a synthetic corpus, dump and query file.
    GenSynthetic(GenArgs),
    /// Rank representation keys by type-discrimination AUC.
    Sweep(SweepArgs),
    /// Train the projection MLP with triplet loss.
    Train(TrainArgs),
    /// Embed every mention and write an index file.
    Index(IndexArgs),
    /// Rank documents for type descriptions.
    Query(QueryArgs),
    /// Rank documents with BM25.
    #[command(name = "baseline-bm25")]
    BaselineBm25(Bm25Args),
    /// Score results files and test significance.
    Evaluate(EvaluateArgs),
    /// Run the key x token x MLP variant grid.
    Ablate(AblateArgs),
}

#[derive(Args, Serialize)]
struct ValidateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    types: usize,
    #[arg(long, default_value_t = 20)]
    mentions: usize,
    #[arg(long, default_value_t = 0.8)]
    separation: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    context_strength: f64,
    #[arg(long)]
    latent_rank: Option<usize>,
    /// Number of trailing types written to the query file as held-out types.
    #[arg(long, default_value_t = 5)]
    holdout: usize,
    /// Write the dump in the packed binary encoding.
    #[arg(long)]
    binary: bool,
    #[arg(long, default_value = "synthetic")]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 20)]
    types: usize,
    #[arg(long, default_value_t = 20)]
    mentions: usize,
    /// Restrict to these keys (comma separated); default is every key in the dump.
    #[arg(long, value_delimiter = ',')]
    keys: Vec<RepresentationKey>,
    #[arg(long)]
    out: PathBuf,
    /// Also write AUC against relative depth.
    #[arg(long)]
    depth_out: Option<PathBuf>,
    #[arg(long)]
    num_blocks: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TokenArg {
    SpanEnd,
    Eos,
}

impl From<TokenArg> for MentionToken {
    fn from(t: TokenArg) -> Self {
        match t {
            TokenArg::SpanEnd => MentionToken::SpanEnd,
            TokenArg::Eos => MentionToken::Eos,
        }
    }
}

#[derive(Args, Serialize, Clone)]
struct TrainParams {
    #[arg(long, default_value_t = 200)]
    triplets_per_type: usize,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    hard_negative_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 500)]
    hidden: usize,
    #[arg(long, default_value_t = 500)]
    output: usize,
}

impl TrainParams {
    fn setup(&self, seed: u64) -> ProjectionSetup {
        ProjectionSetup {
            hidden: self.hidden,
            output: self.output,
            dropout: self.dropout,
            init_seed: seed,
            triplets: TripletConfig {
                per_type: self.triplets_per_type,
                hard_negative_fraction: self.hard_negative_fraction,
                seed,
            },
            train: TrainConfig {
                margin: self.margin,
                learning_rate: self.lr,
                batch_size: self.batch_size,
                epochs: self.epochs,
                seed,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    key: RepresentationKey,
    #[arg(long, value_enum, default_value_t = TokenArg::SpanEnd)]
    token: TokenArg,
    /// Query file whose types are held out of training.
    #[arg(long)]
    holdout_queries: Option<PathBuf>,
    #[command(flatten)]
    params: TrainParams,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    key: RepresentationKey,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TokenArg::SpanEnd)]
    token: TokenArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dump holding the description embeddings.
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    key: RepresentationKey,
    /// A type description; may be repeated.
    #[arg(long = "type", required_unless_present = "queries")]
    types: Vec<String>,
    #[arg(long, conflicts_with = "types")]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    min_score: Option<f64>,
    /// Results file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct Bm25Args {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 200)]
    k: usize,
    #[arg(long, default_value_t = 1.2)]
    k1: f64,
    #[arg(long, default_value_t = 0.75)]
    b: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Best,
    Ablation,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// System names, one per results file; defaults to the file stems.
    #[arg(long, value_delimiter = ',')]
    names: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "rprec,p@50,p@200")]
    metrics: Vec<Metric>,
    #[arg(long, value_enum, default_value_t = ModeArg::Best)]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "17:attn.v")]
    selected_key: RepresentationKey,
    #[arg(long, default_value = "31:block.out")]
    final_key: RepresentationKey,
    #[arg(long, default_value_t = 200)]
    k: usize,
    #[arg(long)]
    min_score: Option<f64>,
    #[command(flatten)]
    params: TrainParams,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Provenance written next to (or inside) every artifact.
#[derive(Serialize)]
struct RunConfig<'a> {
    tool: &'static str,
    version: &'static str,
    #[serde(flatten)]
    cli: &'a Cli,
}

impl RunConfig<'_> {
    fn value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn sidecar(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_sidecar(artifact: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&sidecar(artifact), &cfg.value())
}

fn need_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("input file {} does not exist", p.display());
    }
    Ok(())
}

fn need_out(p: &Path) -> Result<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            bail!("output directory {} does not exist", dir.display())
        }
        _ => Ok(()),
    }
}

fn load_corpus(p: &Path) -> Result<Corpus> {
    Corpus::load(p).with_context(|| format!("loading corpus {}", p.display()))
}

fn load_store(p: &Path, corpus: Option<&Corpus>) -> Result<entret_core::RepresentationStore> {
    let opts = LoadOptions {
        corpus,
        ..LoadOptions::default()
    };
    load_dump(p, &opts).with_context(|| format!("loading dump {}", p.display()))
}

fn queries_from(p: &Path) -> Result<Vec<TypeQuery>> {
    load_queries(p).with_context(|| format!("loading queries {}", p.display()))
}

fn load_model(p: &Path) -> Result<ProjectionModel> {
    Ok(ProjectionModel::load(p)
        .with_context(|| format!("loading model {}", p.display()))?
        .0)
}

fn validate(a: &ValidateArgs) -> Result<()> {
    need_file(&a.corpus)?;
    for p in a.dump.iter().chain(&a.queries) {
        need_file(p)?;
    }
    let corpus = load_corpus(&a.corpus)?;
    let spans: usize = corpus.documents().iter().map(|d| d.spans().len()).sum();
    let mut summary = json!({
        "documents": corpus.len(),
        "spans": spans,
        "types": corpus.mentions_by_type().len(),
    });
    if let Some(p) = &a.dump {
        let store = load_store(p, Some(&corpus))?;
        let keys: Vec<String> = store.keys().map(ToString::to_string).collect();
        summary["records"] = json!(store.len());
        summary["keys"] = json!(keys);
    }
    if let Some(p) = &a.queries {
        let qs = queries_from(p)?;
        for q in &qs {
            if let Some(d) = q.relevant_docs.iter().find(|d| corpus.get(d).is_none()) {
                bail!("query {} lists unknown relevant document {d}", q.query_id);
            }
        }
        summary["queries"] = json!(qs.len());
    }
    writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn gen_synthetic(a: &GenArgs, seed: u64, cfg: &RunConfig) -> Result<()> {
    if a.holdout >= a.types {
        bail!("--holdout ({}) must be smaller than --types ({})", a.holdout, a.types);
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let data = synth_generate(&SynthConfig {
        num_types: a.types,
        mentions_per_type: a.mentions,
        separation: a.separation,
        noise: a.noise,
        context_strength: a.context_strength,
        latent_rank: a.latent_rank,
        seed,
        ..SynthConfig::default()
    })?;
    let corpus = a.out_dir.join("corpus.jsonl");
    data.corpus.save(&corpus)?;
    let dump = if a.binary {
        let p = a.out_dir.join("dump.bin");
        data.store.save_binary(&p)?;
        p
    } else {
        let p = a.out_dir.join("dump.jsonl");
        data.store.save_jsonl(&p)?;
        p
    };
    let held = data.types[a.types - a.holdout..].iter().map(|t| t.label.as_str());
    let queries = a.out_dir.join("queries.jsonl");
    save_queries(&data.queries(held), &queries)?;
    write_json(&a.out_dir.join("run.json"), &cfg.value())?;
    eprintln!("wrote {}, {}, {}", corpus.display(), dump.display(), queries.display());
    Ok(())
}

fn sweep(a: &SweepArgs, seed: u64, cfg: &RunConfig) -> Result<()> {
    need_file(&a.corpus)?;
    need_file(&a.dump)?;
    need_out(&a.out)?;
    if let Some(p) = &a.depth_out {
        need_out(p)?;
    }
    let corpus = load_corpus(&a.corpus)?;
    let store = load_store(&a.dump, Some(&corpus))?;
    let keys: Vec<RepresentationKey> = if a.keys.is_empty() {
        store.keys().cloned().collect()
    } else {
        a.keys.clone()
    };
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| seed.wrapping_add(i)).collect();
    let pair_cfg = PairConfig {
        types_sample: a.types,
        mentions_per_type: a.mentions,
        max_positives: None,
    };
    let res = run_sweep(&store, &corpus, &keys, &seeds, &pair_cfg)?;
    fs::write(&a.out, heatmap_csv(&res))?;
    write_sidecar(&a.out, cfg)?;
    if let Some(p) = &a.depth_out {
        fs::write(p, depth_csv(&res, a.num_blocks))?;
        write_sidecar(p, cfg)?;
    }
    for (k, v) in res.ranking() {
        writeln!(io::stdout(), "{k}\t{v:.6}")?;
    }
    Ok(())
}

fn train(a: &TrainArgs, seed: u64, cfg: &RunConfig) -> Result<()> {
    need_file(&a.corpus)?;
    need_file(&a.dump)?;
    if let Some(p) = &a.holdout_queries {
        need_file(p)?;
    }
    need_out(&a.out)?;
    let corpus = load_corpus(&a.corpus)?;
    let store = load_store(&a.dump, Some(&corpus))?;
    let split = match &a.holdout_queries {
        Some(p) => query_holdout(&corpus, &queries_from(p)?),
        None => TypeSplit::holdout(&corpus, Vec::<String>::new()),
    };
    let (model, report) = train_projection(&corpus, &store, &a.key, a.token.into(), &split, &a.params.setup(seed))?;
    let mut config = cfg.value();
    config["train_report"] = serde_json::to_value(&report)?;
    model.save(&a.out, Some(&config))?;
    write_sidecar(&a.out, cfg)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        eprintln!("epoch {}: loss {l:.6}", i + 1);
    }
    Ok(())
}

fn index(a: &IndexArgs, cfg: &RunConfig) -> Result<()> {
    need_file(&a.corpus)?;
    need_file(&a.dump)?;
    if let Some(p) = &a.model {
        need_file(p)?;
    }
    need_out(&a.out)?;
    let corpus = load_corpus(&a.corpus)?;
    let store = load_store(&a.dump, Some(&corpus))?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    let idx = build_index(&corpus, &store, &a.key, a.token.into(), model.as_ref())?;
    idx.save(&a.out)?;
    write_sidecar(&a.out, cfg)?;
    eprintln!("indexed {} vectors from {} documents", idx.len(), idx.num_docs());
    Ok(())
}

fn emit_results(results: &[QueryResult], out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    match out {
        Some(p) => {
            save_results(results, p)?;
            write_sidecar(p, cfg)
        }
        None => {
            let stdout = io::stdout();
            entret_core::eval::write_results(results, stdout.lock())?;
            Ok(())
        }
    }
}

fn query(a: &QueryArgs, cfg: &RunConfig) -> Result<()> {
    need_file(&a.index)?;
    need_file(&a.dump)?;
    for p in a.model.iter().chain(&a.queries) {
        need_file(p)?;
    }
    if let Some(p) = &a.out {
        need_out(p)?;
    }
    let index = VectorIndex::load(&a.index).with_context(|| format!("loading index {}", a.index.display()))?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    let store = load_store(&a.dump, None)?;
    let queries = match &a.queries {
        Some(p) => queries_from(p)?,
        None => a
            .types
            .iter()
            .map(|t| TypeQuery::new(t.clone(), t.clone(), Vec::new()))
            .collect::<entret_core::Result<_>>()?,
    };
    let results = run_queries(&index, &store, &a.key, model.as_ref(), &queries, a.k, a.min_score)?;
    emit_results(&results, a.out.as_deref(), cfg)
}

fn baseline(a: &Bm25Args, cfg: &RunConfig) -> Result<()> {
    need_file(&a.corpus)?;
    need_file(&a.queries)?;
    need_out(&a.out)?;
    let corpus = load_corpus(&a.corpus)?;
    let queries = queries_from(&a.queries)?;
    let idx = bm25_index(&corpus, Bm25Params { k1: a.k1, b: a.b })?;
    emit_results(&run_bm25(&idx, &queries, a.k), Some(&a.out), cfg)
}

fn evaluate(a: &EvaluateArgs, cfg: &RunConfig) -> Result<()> {
    need_file(&a.queries)?;
    for p in &a.results {
        need_file(p)?;
    }
    need_out(&a.out)?;
    if !a.names.is_empty() && a.names.len() != a.results.len() {
        bail!("{} names given for {} results files", a.names.len(), a.results.len());
    }
    let queries = queries_from(&a.queries)?;
    let mut systems = Vec::with_capacity(a.results.len());
    for (i, p) in a.results.iter().enumerate() {
        let name = match a.names.get(i) {
            Some(n) => n.clone(),
            None => p
                .file_stem()
                .map_or_else(|| format!("system{i}"), |s| s.to_string_lossy().into_owned()),
        };
        let res = load_results(p).with_context(|| format!("loading results {}", p.display()))?;
        systems.push((name, res));
    }
    let mode = match a.mode {
        ModeArg::Best => CompareMode::BestVsRunnerUp,
        ModeArg::Ablation => CompareMode::Ablation,
    };
    let mut report = compare_systems(&systems, &queries, &a.metrics, mode)?;
    report.config = Some(cfg.value());
    write_json(&a.out, &report)?;
    for s in &report.systems {
        let means: Vec<String> = s.macro_means.iter().map(|(m, v)| format!("{m}={v:.4}")).collect();
        writeln!(io::stdout(), "{}\t{}", s.system, means.join("\t"))?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs, seed: u64, cfg: &RunConfig) -> Result<()> {
    need_file(&a.corpus)?;
    need_file(&a.dump)?;
    need_file(&a.queries)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let corpus = load_corpus(&a.corpus)?;
    let store = load_store(&a.dump, Some(&corpus))?;
    let queries = queries_from(&a.queries)?;
    let acfg = AblationConfig {
        selected: a.selected_key.clone(),
        last: a.final_key.clone(),
        k: a.k,
        min_score: a.min_score,
        projection: a.params.setup(seed),
    };
    let out = run_ablation(&corpus, &store, &queries, &acfg)?;
    for (v, res) in &out.variants {
        let file = v.name().replace(['/', ':'], "_") + ".jsonl";
        emit_results(res, Some(&a.out_dir.join(file)), cfg)?;
    }
    let mut report = out.report;
    report.config = Some(cfg.value());
    write_json(&a.out_dir.join("report.json"), &report)?;
    for s in &report.systems {
        writeln!(
            io::stdout(),
            "{}\trprec={:.4}",
            s.system,
            s.macro_mean(Metric::RPrecision).unwrap_or(0.0)
        )?;
    }
    Ok(())
}

fn threads(cli: &Cli) -> Result<Option<usize>> {
    if let Some(n) = cli.threads {
        return Ok(Some(n));
    }
    match std::env::var("NR_THREADS") {
        Ok(v) => Ok(Some(
            v.trim().parse().with_context(|| format!("invalid NR_THREADS {v:?}"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = threads(cli)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = RunConfig {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        cli,
    };
    match &cli.command {
        Command::Validate(a) => validate(a),
        Command::GenSynthetic(a) => gen_synthetic(a, cli.seed, &cfg),
        Command::Sweep(a) => sweep(a, cli.seed, &cfg),
        Command::Train(a) => train(a, cli.seed, &cfg),
        Command::Index(a) => index(a, &cfg),
        Command::Query(a) => query(a, &cfg),
        Command::BaselineBm25(a) => baseline(a, &cfg),
        Command::Evaluate(a) => evaluate(a, &cfg),
        Command::Ablate(a) => ablate(a, cli.seed, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed stdout (`entret sweep ... | head`) is not a failure
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<io::Error>()
                    .is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
            }) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            let causes: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("{}", json!({ "error": causes[0], "causes": &causes[1..] }));
            ExitCode::from(1)
        }
    }
}
