//! The `scopilot` command line. [`run`] parses arguments, dispatches and maps
//! outcomes onto exit codes: 0 success, 1 domain failure, 2 misuse.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand};
use scopilot_core::corpus::{
    build_corpus, gold_to_jsonl, holdout_split, load_built, read_sources, synth_corpus, write_sources, MetadataIndex,
    SectionName, SynthMode, DEFAULT_INJECT_BUDGET, GOLD_FILE, METADATA_FILE,
};
use scopilot_core::evalkit::{
    compare_retrievers, make_masked_queries, Bm25Retriever, DenseRetriever, JudgeClient, JudgeConfig, JudgeInput,
    Retriever,
};
use scopilot_core::index::{build_checksum, DenseIndex};
use scopilot_core::model::{write_atomic, Checkpoint, ScholarLm};
use scopilot_core::orchestrator::{
    export, CitationAction, DecodeConfig, DecodeMode, ExportFormat, GenerationEvent, Resources, SessionState, Status,
};
use scopilot_core::trainer::{Control, MetricsLog, Profile, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "scopilot", version, about = "Citation-aware drafting: corpus, training, retrieval and generation")]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Base directory: relative paths resolve against it.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    /// JSON training profile; overrides --profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or synthesize corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train the joint model.
    Train(TrainArgs),
    /// Build retrieval indexes.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Evaluate retrieval.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Draft text with interleaved citation retrieval.
    Generate(GenerateArgs),
    /// Score generated text with an external judge model.
    Judge(JudgeArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Parse .tex/.bib sources and integrate matched references.
    Build(CorpusBuildArgs),
    /// Generate a synthetic corpus with gold citations.
    Synth(CorpusSynthArgs),
}

#[derive(Debug, Args)]
pub struct CorpusBuildArgs {
    /// Directory of <id>.tex and <id>.bib files.
    #[arg(long = "src", visible_alias = "papers")]
    pub papers: PathBuf,
    /// Reference metadata, one JSON object per line.
    #[arg(long = "meta", visible_alias = "metadata")]
    pub metadata: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub min_freq: usize,
    #[arg(long, default_value_t = DEFAULT_INJECT_BUDGET)]
    pub inject_budget: usize,
}

#[derive(Debug, Args)]
pub struct CorpusSynthArgs {
    #[arg(long, default_value_t = 200)]
    pub papers: usize,
    #[arg(long, default_value_t = 500)]
    pub refs: usize,
    #[arg(long, default_value_t = SynthMode::Synonym)]
    pub mode: SynthMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory of `corpus build`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Built-in profile: desk, reference or paper-scale.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fraction of papers held out from training, by id.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Per-step metrics log; defaults to <out>.metrics.jsonl.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum IndexCmd {
    /// Embed every reference with a checkpoint.
    Build(IndexBuildArgs),
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Masked-context Recall@k, dense against BM25.
    Recall(RecallArgs),
}

#[derive(Debug, Args)]
pub struct RecallArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    pub k: Vec<usize>,
    /// Evaluate the held-out fraction; 0 evaluates every paper.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Directory for recall.json and recall.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["interactive", "auto"])))]
pub struct GenerateArgs {
    #[arg(long, env = "SCOPILOT_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "SCOPILOT_INDEX")]
    pub index: PathBuf,
    #[arg(long, env = "SCOPILOT_METADATA")]
    pub metadata: PathBuf,
    #[arg(long)]
    pub title: String,
    #[arg(long = "abstract")]
    pub abstract_text: Option<String>,
    #[arg(long, default_value = "introduction")]
    pub section: String,
    /// Pause at each retrieval token and ask which candidate to cite.
    #[arg(long)]
    pub interactive: bool,
    /// Cite the top candidate at each pause.
    #[arg(long)]
    pub auto: bool,
    /// Tokens per decoding step.
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    /// Total token budget in auto mode.
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long, default_value_t = 5)]
    pub candidates: usize,
    /// Leave reference content out of the context after a citation.
    #[arg(long)]
    pub no_inject: bool,
    /// Directory for draft.tex, refs.bib and events.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// JSON lines with title, abstract, ground_truth and generated.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Judge client settings as JSON; flags below override it.
    #[arg(long)]
    pub judge_config: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_concurrent: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SCOPILOT_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "SCOPILOT_INDEX")]
    pub index: PathBuf,
    #[arg(long, env = "SCOPILOT_METADATA")]
    pub metadata: PathBuf,
    #[arg(long, env = "SCOPILOT_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Concurrent generation cap.
    #[arg(long, env = "SCOPILOT_GENERATION_CAP", default_value_t = scopilot_service::DEFAULT_GENERATION_CAP)]
    pub cap: usize,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::Domain(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = if code == EXIT_OK { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).try_init();
    match (Ctx { cli: &cli }).dispatch(input, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Domain(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.cli.data_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn input_file(&self, flag: &str, p: &Path) -> CliResult<PathBuf> {
        let r = self.resolve(p);
        if r.is_file() {
            Ok(r)
        } else {
            Err(usage(format!("--{flag}: {} is not a readable file", r.display())))
        }
    }

    fn input_dir(&self, flag: &str, p: &Path) -> CliResult<PathBuf> {
        let r = self.resolve(p);
        if r.is_dir() {
            Ok(r)
        } else {
            Err(usage(format!("--{flag}: {} is not a directory", r.display())))
        }
    }

    fn output(&self, p: &Path) -> PathBuf {
        self.resolve(p)
    }

    fn output_file(&self, flag: &str, p: &Path) -> CliResult<PathBuf> {
        let r = self.resolve(p);
        if r.is_dir() {
            return Err(usage(format!("--{flag}: {} is a directory", r.display())));
        }
        Ok(r)
    }

    fn seed(&self, default: u64) -> u64 {
        self.cli.seed.unwrap_or(default)
    }

    fn profile(&self, name: &str) -> CliResult<Profile> {
        let p = match &self.cli.config {
            Some(path) => {
                let path = self.input_file("config", path)?;
                let text = fs::read_to_string(&path)?;
                serde_json::from_str::<Profile>(&text)
                    .map_err(|e| usage(format!("--config {}: {e}", path.display())))?
            }
            None => Profile::by_name(name).ok_or_else(|| {
                usage(format!("--profile: unknown {name:?}; expected desk, reference or paper-scale"))
            })?,
        };
        p.validate().map_err(|e| usage(format!("profile {}: {e}", p.name)))?;
        Ok(p)
    }

    fn dispatch(&self, input: &mut dyn BufRead, out: &mut dyn Write) -> CliResult {
        match &self.cli.command {
            Command::Corpus(CorpusCmd::Synth(a)) => self.corpus_synth(a, out),
            Command::Corpus(CorpusCmd::Build(a)) => self.corpus_build(a, out),
            Command::Train(a) => self.train(a, out),
            Command::Index(IndexCmd::Build(a)) => self.index_build(a, out),
            Command::Eval(EvalCmd::Recall(a)) => self.eval_recall(a, out),
            Command::Generate(a) => self.generate(a, input, out),
            Command::Judge(a) => self.judge(a, out),
            Command::Serve(a) => self.serve(a),
        }
    }

    fn corpus_synth(&self, a: &CorpusSynthArgs, out: &mut dyn Write) -> CliResult {
        let dir = self.output(&a.out);
        let c = synth_corpus(self.seed(0), a.papers, a.refs, a.mode)?;
        write_sources(&dir.join("papers"), &c.sources)?;
        write_atomic(&dir.join(METADATA_FILE), c.metadata.to_jsonl().as_bytes())?;
        write_atomic(&dir.join(GOLD_FILE), gold_to_jsonl(&c.gold).as_bytes())?;
        writeln!(
            out,
            "wrote {} papers, {} references, {} gold citations to {}",
            c.sources.len(),
            c.metadata.len(),
            c.gold.len(),
            dir.display()
        )?;
        Ok(())
    }

    fn corpus_build(&self, a: &CorpusBuildArgs, out: &mut dyn Write) -> CliResult {
        let papers = self.input_dir("src", &a.papers)?;
        let meta_path = self.input_file("meta", &a.metadata)?;
        let dir = self.output(&a.out);
        let metadata = MetadataIndex::load_jsonl(&meta_path)?;
        let sources = read_sources(&papers)?;
        if sources.is_empty() {
            return Err(anyhow!("no .tex files in {}", papers.display()).into());
        }
        let built = build_corpus(&sources, &metadata, a.min_freq, a.inject_budget)?;
        built.write(&dir, &metadata)?;
        for (id, reason) in &built.failures {
            log::warn!("skipped {id}: {reason}");
        }
        writeln!(out, "{}", built.stats)?;
        writeln!(out, "vocabulary: {} tokens; {} parse failures", built.vocab.len(), built.failures.len())?;
        Ok(())
    }

    fn train(&self, a: &TrainArgs, out: &mut dyn Write) -> CliResult {
        let corpus = self.input_dir("corpus", &a.corpus)?;
        let ckpt_path = self.output_file("out", &a.out)?;
        if !(0.0..1.0).contains(&a.holdout) {
            return Err(usage("--holdout must be in [0, 1)"));
        }
        let (vocab, examples, metadata) = load_built(&corpus)?;
        let (train, _) = if a.holdout > 0.0 { holdout_split(&examples, a.holdout) } else { (examples, Vec::new()) };
        let mut trainer = match &a.resume {
            Some(p) => {
                let (ckpt, _) = Checkpoint::load(&self.input_file("resume", p)?)?;
                if ckpt.vocab != vocab {
                    return Err(anyhow!("resume checkpoint was trained on a different vocabulary").into());
                }
                Trainer::resume(ckpt, &metadata)?
            }
            None => {
                let mut p = self.profile(&a.profile)?;
                if let Some(s) = self.cli.seed {
                    p.train.seed = s;
                }
                let model = ScholarLm::init(p.model.with_vocab(vocab.len()), p.train.seed)?;
                Trainer::new(model, vocab, &metadata, p.train)?
            }
        };
        if let Some(e) = a.epochs {
            trainer.set_epochs(e);
        }
        let metrics_path = match &a.metrics {
            Some(m) => self.output_file("metrics", m)?,
            None => ckpt_path.with_extension("metrics.jsonl"),
        };
        if let Some(dir) = metrics_path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut log = MetricsLog::open(&metrics_path)?;
        let mut io_err = None;
        let epochs = trainer.run(&train, |m| match log.append(m) {
            Ok(()) => Control::Continue,
            Err(e) => {
                io_err = Some(e);
                Control::Stop
            }
        })?;
        if let Some(e) = io_err {
            return Err(anyhow!(e).context("writing metrics").into());
        }
        for e in &epochs {
            writeln!(out, "epoch {:>3}  L_g {:.4}  L_r {:.4}  L_total {:.4}", e.epoch, e.l_g, e.l_r, e.l_total)?;
        }
        let id = trainer.checkpoint().save(&ckpt_path)?;
        writeln!(out, "checkpoint {} ({id})", ckpt_path.display())?;
        Ok(())
    }

    fn index_build(&self, a: &IndexBuildArgs, out: &mut dyn Write) -> CliResult {
        let ckpt_path = self.input_file("checkpoint", &a.checkpoint)?;
        let meta_path = self.input_file("metadata", &a.metadata)?;
        let dest = self.output_file("out", &a.out)?;
        let (ckpt, ckpt_id) = Checkpoint::load(&ckpt_path)?;
        let metadata = MetadataIndex::load_jsonl(&meta_path)?;
        let budget = ckpt
            .train_state
            .as_ref()
            .and_then(|s| s["config"]["ref_budget"].as_u64())
            .map_or(DEFAULT_INJECT_BUDGET, |b| b as usize);
        let embs = ckpt.model.embed_references(&ckpt.vocab, metadata.entries(), budget)?;
        let index = DenseIndex::build(&embs, build_checksum(&ckpt_id, &metadata.metadata_id()))?;
        index.save(&dest)?;
        writeln!(out, "indexed {} references (dim {}) into {}", index.len(), index.dim(), dest.display())?;
        Ok(())
    }

    fn eval_recall(&self, a: &RecallArgs, out: &mut dyn Write) -> CliResult {
        let corpus = self.input_dir("corpus", &a.corpus)?;
        let ckpt_path = self.input_file("checkpoint", &a.checkpoint)?;
        let index_path = self.input_file("index", &a.index)?;
        if a.k.is_empty() || a.k.contains(&0) {
            return Err(usage("--k: every k must be at least 1"));
        }
        let (_, examples, metadata) = load_built(&corpus)?;
        let (ckpt, ckpt_id) = Checkpoint::load(&ckpt_path)?;
        let index = DenseIndex::load(&index_path)?;
        let eval = if a.holdout > 0.0 { holdout_split(&examples, a.holdout).1 } else { examples };
        let queries = make_masked_queries(&eval, &ckpt.vocab);
        let dense = DenseRetriever::new(&ckpt.model, &index, &ckpt_id, &metadata.metadata_id());
        let bm25 = Bm25Retriever::new(&metadata);
        let retrievers: [&dyn Retriever; 2] = [&dense, &bm25];
        let report = compare_retrievers(&queries, &retrievers, &a.k)?;
        write!(out, "{}", report.render())?;
        if let Some(dir) = &a.out {
            let dir = self.output(dir);
            fs::create_dir_all(&dir)?;
            write_atomic(&dir.join("recall.json"), report.to_json().as_bytes())?;
            write_atomic(&dir.join("recall.csv"), report.to_csv().as_bytes())?;
        }
        Ok(())
    }

    fn generate(&self, a: &GenerateArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> CliResult {
        let resources = Resources::load(
            &self.input_file("checkpoint", &a.checkpoint)?,
            &self.input_file("index", &a.index)?,
            &self.input_file("metadata", &a.metadata)?,
        )?;
        let section: SectionName = a.section.parse().map_err(|e| usage(format!("--section: {e}")))?;
        let decode = DecodeConfig {
            mode: match a.temperature {
                Some(t) => DecodeMode::Temperature { temperature: t },
                None => DecodeMode::Greedy,
            },
            max_new_tokens: a.max_new_tokens,
            candidates: a.candidates,
            inject_content: !a.no_inject,
            ..DecodeConfig::default()
        };
        let mut s = SessionState::new(
            "cli",
            &resources.vocab,
            &a.title,
            a.abstract_text.as_deref(),
            section,
            decode,
            self.seed(0),
        )
        .map_err(|e| usage(e.to_string()))?;
        let orch = resources.orchestrator()?;
        let events = if a.auto { orch.run_auto(&mut s, a.budget)? } else { interactive(&orch, &mut s, input, out)? };
        let tex = export(&s, &resources.vocab, &resources.metadata, ExportFormat::Tex)?;
        let bib = export(&s, &resources.vocab, &resources.metadata, ExportFormat::Bib)?;
        if let Some(dir) = &a.out {
            let dir = self.output(dir);
            fs::create_dir_all(&dir)?;
            write_atomic(&dir.join("draft.tex"), tex.as_bytes())?;
            write_atomic(&dir.join("refs.bib"), bib.as_bytes())?;
            let lines: String = events.iter().map(GenerationEvent::to_ndjson).collect();
            write_atomic(&dir.join("events.jsonl"), lines.as_bytes())?;
        }
        if a.auto {
            write!(out, "{tex}")?;
            if !bib.is_empty() {
                write!(out, "\n{bib}")?;
            }
        }
        Ok(())
    }

    fn judge(&self, a: &JudgeArgs, out: &mut dyn Write) -> CliResult {
        let input_path = self.input_file("input", &a.input)?;
        let dest = self.output_file("out", &a.out)?;
        let mut config = match &a.judge_config {
            Some(p) => serde_json::from_str::<JudgeConfig>(&fs::read_to_string(self.input_file("judge-config", p)?)?)
                .context("judge config")?,
            None => JudgeConfig::default(),
        };
        if let Some(v) = &a.endpoint {
            config.endpoint = v.clone();
        }
        if let Some(v) = &a.model {
            config.model = v.clone();
        }
        if let Some(v) = &a.api_key_env {
            config.api_key_env = v.clone();
        }
        if let Some(v) = &a.cache_dir {
            config.cache_dir = Some(self.resolve(v));
        }
        if let Some(v) = a.max_concurrent {
            config.max_concurrent = v;
        }
        let inputs = fs::read_to_string(&input_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str::<JudgeInput>(l).with_context(|| format!("input line {}", i + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let client = JudgeClient::new(config);
        let results = client.judge_all(&inputs);
        let mut lines = String::new();
        let mut sums = [0u32; 6];
        let mut failures = 0;
        for (i, r) in results.iter().enumerate() {
            let v = match r {
                Ok(p) => {
                    if let Some(w) = &p.warning {
                        log::warn!("input {}: {w}", i + 1);
                    }
                    for (s, c) in sums.iter_mut().zip(p.scores.components()) {
                        *s += u32::from(c);
                    }
                    sums[5] += p.scores.total;
                    serde_json::to_value(p.scores)?
                }
                Err(e) => {
                    failures += 1;
                    serde_json::json!({ "error": e.to_string() })
                }
            };
            lines.push_str(&v.to_string());
            lines.push('\n');
        }
        write_atomic(&dest, lines.as_bytes())?;
        let ok = (results.len() - failures).max(1) as f64;
        let names = ["relevance", "coherence", "academic", "completeness", "innovation", "total"];
        for (n, s) in names.iter().zip(sums) {
            writeln!(out, "{n:<13} {:.2}", s as f64 / ok)?;
        }
        if failures > 0 {
            return Err(anyhow!("{failures} of {} judge calls failed", results.len()).into());
        }
        Ok(())
    }

    fn serve(&self, a: &ServeArgs) -> CliResult {
        let config = scopilot_service::ServiceConfig {
            data_dir: self.cli.data_dir.clone().unwrap_or_else(|| PathBuf::from("data")),
            checkpoint: self.input_file("checkpoint", &a.checkpoint)?,
            index: self.input_file("index", &a.index)?,
            metadata: self.input_file("metadata", &a.metadata)?,
            bind: a.bind,
            generation_cap: a.cap,
        };
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(scopilot_service::serve(config)).map_err(|e| anyhow!(e))?;
        Ok(())
    }
}

fn interactive(
    orch: &scopilot_core::orchestrator::Orchestrator<'_>,
    s: &mut SessionState,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> CliResult<Vec<GenerationEvent>> {
    let mut events = Vec::new();
    let mut line = String::new();
    let mut prompt = |out: &mut dyn Write, text: &str| -> CliResult<Option<String>> {
        write!(out, "{text}")?;
        out.flush()?;
        line.clear();
        Ok((input.read_line(&mut line)? > 0).then(|| line.trim().to_string()))
    };
    loop {
        if s.status == Status::PausedAtRet {
            let hits = s.pending.as_ref().expect("paused").hits.clone();
            writeln!(out)?;
            for (i, h) in hits.iter().enumerate() {
                let title = orch.metadata.get(&h.ref_id).map_or("", |e| e.title.as_str());
                writeln!(out, "  [{}] {} {:.3}  {}", i + 1, h.ref_id, h.score, title)?;
            }
            let Some(answer) = prompt(out, "cite [number | s skip | e <ref id> | q quit]: ")? else { break };
            let action = match answer.as_str() {
                "q" => break,
                "s" | "" => CitationAction::Skip,
                a if a.starts_with("e ") => CitationAction::AcceptExternal { ref_id: a[2..].trim().to_string() },
                a => match a.parse::<usize>().ok().and_then(|n| hits.get(n.wrapping_sub(1))) {
                    Some(h) => CitationAction::Accept { ref_id: h.ref_id.clone() },
                    None => {
                        writeln!(out, "unrecognised choice {a:?}")?;
                        continue;
                    }
                },
            };
            match orch.resolve_citation(s, &action) {
                Ok(ev) => events.extend(ev),
                Err(e) => writeln!(out, "{e}")?,
            }
            continue;
        }
        if s.status == Status::Done {
            break;
        }
        orch.step_with(s, s.decode.max_new_tokens, |e| {
            if let GenerationEvent::Token(t) = e {
                let _ = write!(out, "{t} ");
            }
            events.push(e.clone());
        })?;
        if s.status == Status::Generating {
            let Some(answer) = prompt(out, "\n[enter continue | c cite here | q finish]: ")? else { break };
            match answer.as_str() {
                "q" => break,
                "c" => match orch.resolve_citation(s, &CitationAction::Trigger) {
                    Ok(ev) => events.extend(ev),
                    Err(e) => writeln!(out, "{e}")?,
                },
                _ => {}
            }
        }
    }
    writeln!(out)?;
    Ok(events)
}

/// Reads a profile from a JSON file, for tools that take one directly.
pub fn load_profile(path: &Path) -> anyhow::Result<Profile> {
    let p: Profile = serde_json::from_str(&fs::read_to_string(path)?)?;
    p.validate()?;
    Ok(p)
}
