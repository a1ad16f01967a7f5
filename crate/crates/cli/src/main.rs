//! `geosage` command-line tool.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 internal error.
//! Errors go to standard error as `error[usage]: ...`, `error[data]: ...` or
//! `error[internal]: ...`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geosage::corpus::{parse_checkins, parse_homes, split, Corpus, CorpusBundle, DEFAULT_D_KM, DEFAULT_SPLIT_FRACTION};
use geosage::error::{CorpusError, EvalError, GeoError, ModelError, RecommendError, SynthError, TrainError};
use geosage::eval::{CaseScorer, EvalContext, EvalOptions, ModelScorer, PopularityScorer, RandomScorer, Scenario, DEFAULT_KS};
use geosage::geo::{BoundingBox, GeoPoint, PyramidConfig, DEFAULT_HEIGHT};
use geosage::inference::{train, TrainOptions, TrainingData};
use geosage::model::{ModelConfig, ModelParams, Variant};
use geosage::recsys::{Query, Recommender, DEFAULT_RADIUS_KM};
use geosage::synth::{default_bbox, generate, SynthSpec};

#[derive(Parser)]
#[command(name = "geosage", version, about = "Sparse additive topic model for location-aware recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse check-ins into a corpus bundle with roles and a train/test split.
    Ingest(IngestArgs),
    /// Fit a model on the training part of a corpus bundle.
    Train(TrainArgs),
    /// Recall@k of a model or baseline on the held-out activities.
    Evaluate(EvaluateArgs),
    /// Top-k items for a user at a location.
    Recommend(RecommendArgs),
    /// Generate a synthetic corpus and its ground-truth model.
    Synth(SynthArgs),
    /// Show the top words and items of each topic.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Check-in file: user<TAB>venue<TAB>lat,lon<TAB>words<TAB>0|1|-
    #[arg(long)]
    checkins: PathBuf,
    /// Optional homes file: user<TAB>lat,lon
    #[arg(long)]
    homes: Option<PathBuf>,
    /// min_lat,min_lon,max_lat,max_lon (default: continental US)
    #[arg(long, value_parser = parse_bbox)]
    bbox: Option<BoundingBox>,
    #[arg(long, default_value_t = DEFAULT_HEIGHT)]
    height: u8,
    #[arg(long, default_value_t = DEFAULT_D_KM)]
    d_km: f64,
    #[arg(long, default_value_t = DEFAULT_SPLIT_FRACTION)]
    split_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = Variant::Full)]
    variant: Variant,
    #[arg(long, default_value_t = 0.1)]
    l1: f64,
    #[arg(long, default_value_t = TrainOptions::default().em_iters)]
    em_iters: usize,
    #[arg(long, default_value_t = TrainOptions::default().mstep_iters)]
    mstep_iters: usize,
    #[arg(long, default_value_t = TrainOptions::default().gibbs_sweeps_per_e)]
    sweeps: usize,
    #[arg(long, default_value_t = TrainOptions::default().convergence_tol)]
    tol: f64,
    #[arg(long)]
    freeze_backgrounds: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write one JSON line per EM iteration here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Model,
    Random,
    Popularity,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Home,
    Out,
    Both,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Required for `--method model`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Model)]
    method: Method,
    #[arg(long, value_enum, default_value_t = ScenarioArg::Both)]
    scenario: ScenarioArg,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    ks: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_RADIUS_KM)]
    radius_km: f64,
    /// Only users with at most this many training activities.
    #[arg(long)]
    cold_start_max: Option<usize>,
    /// Seed for the random baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report destination (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump per-case ranks as JSON lines.
    #[arg(long)]
    ranks: Option<PathBuf>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// User name; names missing from the corpus are treated as new users.
    #[arg(long)]
    user: String,
    #[arg(long, allow_hyphen_values = true)]
    lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    lon: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_RADIUS_KM)]
    radius_km: f64,
    #[arg(long)]
    zoom: Option<u8>,
    /// Print the score breakdown of the top result.
    #[arg(long)]
    explain: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().n_users)]
    users: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_items)]
    items: usize,
    #[arg(long, default_value_t = SynthSpec::default().vocab_size)]
    vocab: usize,
    #[arg(long, default_value_t = SynthSpec::default().topics)]
    k: usize,
    #[arg(long, default_value_t = SynthSpec::default().height)]
    height: u8,
    #[arg(long, default_value_t = SynthSpec::default().activities_per_user)]
    activities_per_user: usize,
    #[arg(long, default_value_t = SynthSpec::default().tourist_fraction)]
    tourist_fraction: f64,
    #[arg(long, default_value_t = SynthSpec::default().drift_strength)]
    drift: f64,
    #[arg(long, default_value_t = SynthSpec::default().words_per_item)]
    words_per_item: usize,
    #[arg(long, default_value_t = SynthSpec::default().groups_per_cell)]
    groups_per_cell: usize,
    /// min_lat,min_lon,max_lat,max_lon
    #[arg(long, value_parser = parse_bbox)]
    bbox: Option<BoundingBox>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus bundle destination.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth model destination.
    #[arg(long)]
    truth: PathBuf,
    /// Also write the activities as a check-in file.
    #[arg(long)]
    checkins: Option<PathBuf>,
    /// Also write the homes file.
    #[arg(long)]
    homes: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus bundle used to print names instead of ids.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Only this topic.
    #[arg(long)]
    topic: Option<usize>,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Internal(String),
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (tag, msg, code) = match self {
            Failure::Usage(m) => ("usage", m, 1),
            Failure::Data(m) => ("data", m, 2),
            Failure::Internal(m) => ("internal", m, 3),
        };
        eprintln!("error[{tag}]: {msg}");
        ExitCode::from(code)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<GeoError> for Failure {
    fn from(e: GeoError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::BadFraction(_) | CorpusError::Geo(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteObjective(_) => Failure::Internal(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<RecommendError> for Failure {
    fn from(e: RecommendError) -> Self {
        match e {
            RecommendError::DictMismatch { .. } => Failure::Data(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Recommend(r) => r.into(),
            EvalError::EmptyTestSet => Failure::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::RejectionCapExceeded { .. } => Failure::Data(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn parse_bbox(s: &str) -> Result<BoundingBox, String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    let [a, b, c, d] = v[..] else {
        return Err("expected min_lat,min_lon,max_lat,max_lon".into());
    };
    let p = |lat, lon| GeoPoint::new(lat, lon).map_err(|e| e.to_string());
    BoundingBox::new(p(a, b)?, p(c, d)?).map_err(|e| e.to_string())
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_bundle(path: &Path) -> Result<CorpusBundle, Failure> {
    CorpusBundle::read(open(path)?).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> Result<ModelParams, Failure> {
    ModelParams::read(open(path)?).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Decimal rendering with 12 significant digits.
fn sig12(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn ingest(a: IngestArgs) -> Result<(), Failure> {
    let pyramid = PyramidConfig::new(a.bbox.unwrap_or_else(BoundingBox::continental_us), a.height)?;
    if !(a.d_km > 0.0) {
        return Err(Failure::Usage("--d-km must be positive".into()));
    }
    let parsed = parse_checkins(open(&a.checkins)?)?;
    for m in &parsed.malformed {
        log::warn!("skipped {m}");
    }
    let homes = match &a.homes {
        Some(p) => parse_homes(open(p)?)?,
        None => Default::default(),
    };
    let (corpus, mut report) = Corpus::build(&parsed.records, &homes, pyramid, a.d_km)?;
    report.malformed = parsed.malformed.len();
    if corpus.activities.is_empty() {
        return Err(CorpusError::Empty.into());
    }
    let split = split(&corpus.activities, a.split_fraction, a.seed)?;
    let summary = serde_json::json!({
        "activities": corpus.activities.len(),
        "users": corpus.dicts.n_users(),
        "items": corpus.dicts.n_items(),
        "words": corpus.dicts.n_words(),
        "train": split.train.len(),
        "test_home": split.test_home.len(),
        "test_out": split.test_out.len(),
        "report": report,
    });
    let mut w = create(&a.out)?;
    CorpusBundle { corpus, split }.write(&mut w)?;
    w.flush()?;
    println!("{summary}");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let bundle = read_bundle(&a.corpus)?;
    let cfg = ModelConfig {
        topics: a.k,
        height: bundle.corpus.pyramid.height,
        variant: a.variant,
        l1_weight: a.l1,
        d_km: bundle.corpus.d_km,
        seed: a.seed,
    };
    cfg.validate()?;
    let opts = TrainOptions {
        em_iters: a.em_iters,
        gibbs_sweeps_per_e: a.sweeps,
        mstep_iters: a.mstep_iters,
        convergence_tol: a.tol,
        freeze_backgrounds: a.freeze_backgrounds,
        ..Default::default()
    };
    let data = TrainingData::from_corpus(&bundle.corpus, &bundle.split.train);
    let trained = train(&data, cfg, &opts)?;
    trained.params.validate().map_err(|e| Failure::Internal(e.to_string()))?;
    let mut w = create(&a.out)?;
    trained.params.write(&mut w)?;
    w.flush()?;
    if let Some(path) = &a.trace {
        let mut t = create(path)?;
        for rec in &trained.trace {
            writeln!(t, "{}", serde_json::to_string(rec).map_err(|e| Failure::Internal(e.to_string()))?)?;
        }
        t.flush()?;
    }
    let last = trained.trace.last().expect("at least one EM iteration");
    println!(
        "{}",
        serde_json::json!({
            "iterations": trained.trace.len(),
            "converged": trained.converged,
            "objective": last.objective,
            "nonzeros": last.nonzeros,
        })
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), Failure> {
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(Failure::Usage("--ks must list positive integers".into()));
    }
    let bundle = read_bundle(&a.corpus)?;
    let (corpus, split) = (&bundle.corpus, &bundle.split);
    let model = match (a.method, &a.model) {
        (Method::Model, None) => return Err(Failure::Usage("--model is required for --method model".into())),
        (Method::Model, Some(p)) => Some(read_model(p)?),
        _ => None,
    };
    let scorer: Box<dyn CaseScorer> = match a.method {
        Method::Model => Box::new(ModelScorer::new(model.as_ref().expect("loaded above"), corpus)?),
        Method::Random => Box::new(RandomScorer { seed: a.seed }),
        Method::Popularity => Box::new(PopularityScorer::new(corpus, split)),
    };
    let scenarios: &[Scenario] = match a.scenario {
        ScenarioArg::Home => &[Scenario::Home],
        ScenarioArg::Out => &[Scenario::Out],
        ScenarioArg::Both => &[Scenario::Home, Scenario::Out],
    };
    let opts = EvalOptions { ks: a.ks.clone(), radius_km: a.radius_km, cold_start_max: a.cold_start_max, keep_ranks: a.ranks.is_some() };
    let ctx = EvalContext::new(corpus, split);
    let mut report = String::new();
    let mut ranks = String::new();
    for &scenario in scenarios {
        let r = ctx.evaluate(scorer.as_ref(), scenario, &opts)?;
        report.push_str(&r.to_json_lines());
        if let Some(per_case) = &r.per_case_ranks {
            let cases = ctx.cases(scenario, opts.cold_start_max);
            for (case, rank) in cases.iter().zip(per_case) {
                ranks.push_str(&serde_json::json!({ "scenario": scenario, "activity": case.index, "rank": rank }).to_string());
                ranks.push('\n');
            }
        }
    }
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(report.as_bytes())?;
            w.flush()?;
        }
        None => print!("{report}"),
    }
    if let Some(p) = &a.ranks {
        let mut w = create(p)?;
        w.write_all(ranks.as_bytes())?;
        w.flush()?;
    }
    Ok(())
}

fn recommend_cmd(a: RecommendArgs) -> Result<(), Failure> {
    let model = read_model(&a.model)?;
    let bundle = read_bundle(&a.corpus)?;
    let corpus = &bundle.corpus;
    let rec = Recommender::new(&model, corpus, &bundle.split.train)?;
    let user = corpus.dicts.users.id(&a.user);
    if user.is_none() {
        log::warn!("user {} not in corpus; treating as a new tourist", a.user);
    }
    let q = Query { user, location: GeoPoint::new(a.lat, a.lon)?, k: a.k, radius_km: a.radius_km, zoom_level: a.zoom };
    let list = rec.recommend(&q)?;
    let mut out = io::stdout().lock();
    for (rank, (item, score)) in list.entries.iter().enumerate() {
        writeln!(out, "{}\t{}\t{}", rank + 1, corpus.dicts.items.name(*item), sig12(*score))?;
    }
    if a.explain {
        if let Some(&(top, _)) = list.entries.first() {
            let ex = rec.explain(&q, top)?;
            writeln!(out, "# item {} role {} score {}", corpus.dicts.items.name(top), if ex.role.is_tourist() { "tourist" } else { "local" }, sig12(ex.score))?;
            writeln!(out, "# topic\talpha\tcontent\tgamma")?;
            for z in 0..ex.alpha.len() {
                writeln!(out, "# {z}\t{}\t{}\t{}", sig12(ex.alpha[z]), sig12(ex.content[z]), sig12(ex.gamma[z]))?;
            }
        }
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        n_users: a.users,
        n_items: a.items,
        vocab_size: a.vocab,
        topics: a.k,
        height: a.height,
        activities_per_user: a.activities_per_user,
        tourist_fraction: a.tourist_fraction,
        drift_strength: a.drift,
        seed: a.seed,
        words_per_item: a.words_per_item,
        groups_per_cell: a.groups_per_cell,
        bbox: a.bbox.unwrap_or_else(default_bbox),
        ..Default::default()
    };
    let s = generate(&spec)?;
    let mut w = create(&a.out)?;
    s.bundle.write(&mut w)?;
    w.flush()?;
    let mut w = create(&a.truth)?;
    s.truth.write(&mut w)?;
    w.flush()?;
    if let Some(p) = &a.checkins {
        let mut w = create(p)?;
        s.bundle.corpus.write_checkins(&mut w)?;
        w.flush()?;
    }
    if let Some(p) = &a.homes {
        let mut w = create(p)?;
        s.bundle.corpus.write_homes(&mut w)?;
        w.flush()?;
    }
    println!(
        "{}",
        serde_json::json!({
            "activities": s.bundle.corpus.activities.len(),
            "train": s.bundle.split.train.len(),
            "test_home": s.bundle.split.test_home.len(),
            "test_out": s.bundle.split.test_out.len(),
        })
    );
    Ok(())
}

fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn inspect_cmd(a: InspectArgs) -> Result<(), Failure> {
    let model = read_model(&a.model)?;
    let bundle = a.corpus.as_deref().map(read_bundle).transpose()?;
    if let Some(b) = &bundle {
        let hash = b.corpus.dicts.fingerprint();
        if hash != model.dict_hash {
            return Err(RecommendError::DictMismatch { model: model.dict_hash.clone(), corpus: hash }.into());
        }
    }
    let topics: Vec<usize> = match a.topic {
        Some(z) if z >= model.topics() => {
            return Err(Failure::Usage(format!("topic {z} out of range 0..{}", model.topics())));
        }
        Some(z) => vec![z],
        None => (0..model.topics()).collect(),
    };
    let word = |w: usize| bundle.as_ref().map_or(format!("w#{w}"), |b| b.corpus.dicts.vocab.name(w as u32).to_string());
    let item = |v: usize| bundle.as_ref().map_or(format!("v#{v}"), |b| b.corpus.dicts.items.name(v as u32).to_string());
    let mut out = io::stdout().lock();
    writeln!(out, "# variant {} topics {} height {} l1 {}", model.config.variant, model.topics(), model.height(), model.config.l1_weight)?;
    for z in topics {
        writeln!(out, "topic {z}")?;
        let beta = model.beta(z);
        for w in top_indices(&beta, a.top) {
            writeln!(out, "  word\t{}\t{}", word(w), sig12(beta[w]))?;
        }
        let gamma = model.gamma(z);
        for v in top_indices(&gamma, a.top) {
            writeln!(out, "  item\t{}\t{}", item(v), sig12(gamma[v]))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::panic::set_hook(Box::new(|info| {
        eprintln!("error[internal]: {info}");
    }));
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!("error[usage]: {}", text.strip_prefix("error: ").unwrap_or(&text));
            return ExitCode::from(1);
        }
    };
    let result = std::panic::catch_unwind(|| match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Recommend(a) => recommend_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => f.report(),
        Err(_) => ExitCode::from(3),
    }
}
