//! One line per acceptance criterion. Runs as a plain binary so the lines
//! always reach the test log; exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scopilot_core::corpus::{
    build_corpus, examples_from_jsonl, examples_to_jsonl, holdout_split, parse_paper, read_sources, synth_corpus,
    BuiltCorpus, MetadataIndex, SectionName, SynthCorpus, SynthMode, DEFAULT_INJECT_BUDGET,
};
use scopilot_core::evalkit::{
    compare_retrievers, make_masked_queries, parse_scores, Bm25Retriever, DenseRetriever, JudgeClient, JudgeConfig,
    JudgeError, JudgeInput, RecallReport, Retriever,
};
use scopilot_core::index::{bm25_search, build_checksum, DenseIndex};
use scopilot_core::model::{
    Checkpoint, ModelConfig, QueryEmbedding, RefEmbedding, ScholarLm, TokenId, Vocabulary, REF_CLOSE, REF_OPEN, RET,
};
use scopilot_core::nn::Tensor;
use scopilot_core::orchestrator::{
    export, CitationAction, DecodeConfig, DecodeMode, ExportFormat, GenerationEvent, Orchestrator, Resources,
    SessionState, Status,
};
use scopilot_core::trainer::{
    batch_reference_sequences, build_batch, contrastive_loss, gradient_check, ntp_loss, Control, Profile, Trainer,
};
use scopilot_service::{router, AppState, SessionStore, WriteFault};
use serde_json::{json, Value};

const LOSS_TOL: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_COORDS: usize = 200;
const GRAD_MAX_PARAMS: usize = 50_000;
const BM25_TOL: f64 = 1e-3;
const DENSE_INSTANCES: usize = 20;
const RECALL1_MIN: f64 = 0.5;
const RECALL10_MIN: f64 = 0.8;
const BM25_RECALL1_MAX: f64 = 0.1;
const AUTO_SESSIONS: usize = 50;
const FIXTURE_MATCH_PERCENT: u32 = 87;

const BUDGET_C1: Duration = Duration::from_secs(1);
const BUDGET_C2: Duration = Duration::from_secs(120);
const BUDGET_C3: Duration = Duration::from_secs(10);
const BUDGET_C4: Duration = Duration::from_secs(20 * 60);

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(t0: Instant, budget: Duration) -> Result<String, String> {
    let took = t0.elapsed();
    ensure!(took <= budget, "took {:.1}s, budget {:.0}s", took.as_secs_f64(), budget.as_secs_f64());
    Ok(format!("{:.2}s", took.as_secs_f64()))
}

fn c1_loss_identities() -> Outcome {
    let t0 = Instant::now();
    let uniform = ntp_loss(&Tensor::zeros(vec![4, 8]), &[0, 3, 5, 7], &[true; 4]).map_err(|e| e.to_string())? as f64;
    let e1 = (uniform - 8f64.ln()).abs();
    ensure!(e1 <= LOSS_TOL, "uniform V=8 gave {uniform}, want ln 8");

    let unit = |v: [f32; 3]| {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.map(|x| x / n).to_vec()
    };
    let q = |v: Vec<f32>| QueryEmbedding { vector: v, source_position: 0 };
    let r = |id: &str, v: Vec<f32>| RefEmbedding { ref_id: id.into(), vector: v };
    let v = unit([0.2, -0.7, 0.4]);
    let empty = contrastive_loss(&q(v.clone()), &r("p", v), &[], 0.05).map_err(|e| e.to_string())?;
    ensure!(empty == 0.0, "empty negatives gave {empty}, want exactly 0");

    let opposite = contrastive_loss(&q(vec![1.0, 0.0]), &r("p", vec![1.0, 0.0]), &[r("n", vec![-1.0, 0.0])], 1.0)
        .map_err(|e| e.to_string())? as f64;
    let want = (1.0 + (-2f64).exp()).ln();
    let e3 = (opposite - want).abs();
    ensure!(e3 <= LOSS_TOL, "sim+=1 sim-=-1 tau=1 gave {opposite}, want {want}");
    let t = within(t0, BUDGET_C1)?;
    Ok(format!("ln8 err {e1:.1e}, empty negatives 0, log(1+e^-2) err {e3:.1e}, {t}"))
}

fn c2_gradients() -> Outcome {
    let t0 = Instant::now();
    let c = synth_corpus(5, 12, 24, SynthMode::Synonym).map_err(|e| e.to_string())?;
    let built = build_corpus(&c.sources, &c.metadata, 2, 16).map_err(|e| e.to_string())?;
    let cfg =
        ModelConfig { vocab_size: built.vocab.len(), d_model: 16, n_layers: 1, n_heads: 2, max_context: 64, d_ff: 32 };
    let model = ScholarLm::init(cfg, 11).map_err(|e| e.to_string())?;
    let params = model.params().num_scalars();
    ensure!(params < GRAD_MAX_PARAMS, "model has {params} parameters");
    let batch = build_batch(&built.examples[..3], 64);
    ensure!(batch.queries.len() >= 2, "batch carries {} citation queries", batch.queries.len());
    let refs = batch_reference_sequences(&built.vocab, &c.metadata, &batch, 16, 64).map_err(|e| e.to_string())?;
    let g = gradient_check(&model, &batch, &refs, 1.0, 0.1, GRAD_COORDS, 42).map_err(|e| e.to_string())?;
    ensure!(g.max_rel_err < GRAD_REL_TOL, "max relative error {:.2e} at {}[{}]", g.max_rel_err, g.worst.0, g.worst.1);
    let t = within(t0, BUDGET_C2)?;
    Ok(format!(
        "{params} params, {} coords, {} queries, max rel err {:.2e}, {t}",
        g.coordinates,
        batch.queries.len(),
        g.max_rel_err
    ))
}

fn c3_retrieval_exactness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let unit = |v: Vec<f32>| {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f32>>()
    };
    let mut ties = 0;
    for inst in 0..DENSE_INSTANCES {
        let mut rows: Vec<RefEmbedding> = (0..100)
            .map(|i| RefEmbedding {
                ref_id: format!("r{:03}", (i * 37) % 100),
                vector: unit((0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect()),
            })
            .collect();
        // Duplicate vectors under other ids so ties must break by id.
        for i in 0..5 {
            rows[95 + i].vector = rows[i].vector.clone();
        }
        let index = DenseIndex::build(&rows, "acceptance").map_err(|e| e.to_string())?;
        let q = if inst % 4 == 0 {
            rows[2].vector.clone()
        } else {
            unit((0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        };
        let mut oracle: Vec<(String, f32)> = rows
            .iter()
            .map(|r| {
                let mut s = 0.0f32;
                for j in 0..64 {
                    s += q[j] * r.vector[j];
                }
                (r.ref_id.clone(), s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ties += oracle.windows(2).filter(|w| w[0].1 == w[1].1).count();
        let got = index.search_vector(&q, 100).map_err(|e| e.to_string())?;
        let got: Vec<(String, u32)> = got.hits.iter().map(|h| (h.ref_id.clone(), h.score.to_bits())).collect();
        let want: Vec<(String, u32)> = oracle.iter().map(|(id, s)| (id.clone(), s.to_bits())).collect();
        ensure!(got == want, "instance {inst}: dense ranking differs from full scan");
    }
    ensure!(ties >= DENSE_INSTANCES, "only {ties} tied pairs exercised");

    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let docs = vec![
        ("d1".to_string(), toks("noise noise diffusion")),
        ("d2".to_string(), toks("transformer attention layers")),
        ("d3".to_string(), toks("noise conditioning methods")),
    ];
    // k1 = 1.2, b = 0.75, all lengths equal: idf(df) * tf(k1+1)/(tf+k1).
    let idf = |df: f64| ((3.0 - df + 0.5) / (df + 0.5) + 1.0f64).ln();
    let sat = |tf: f64| tf * 2.2 / (tf + 1.2);
    let hand = [("d1", idf(2.0) * sat(2.0) + idf(1.0) * sat(1.0)), ("d3", idf(2.0) * sat(1.0)), ("d2", 0.0)];
    let got = bm25_search(&docs, &toks("noise diffusion"), 3);
    ensure!(got.hits.len() == 3, "bm25 returned {} hits", got.hits.len());
    for (h, (id, s)) in got.hits.iter().zip(hand) {
        ensure!(
            h.ref_id == id && (h.score as f64 - s).abs() <= BM25_TOL,
            "bm25 {} {} vs hand {id} {s:.4}",
            h.ref_id,
            h.score
        );
    }
    let t = within(t0, BUDGET_C3)?;
    Ok(format!(
        "{DENSE_INSTANCES} dense instances bit-equal ({ties} ties), bm25 d1 {:.3} d3 {:.3}, {t}",
        hand[0].1, hand[1].1
    ))
}

/// The trained reference model and everything evaluated against it.
struct Reference {
    synth: SynthCorpus,
    built: BuiltCorpus,
    model: ScholarLm,
    index: DenseIndex,
    report: RecallReport,
    full_depth: RecallReport,
}

fn reference_run() -> Result<(Reference, Duration), String> {
    let t0 = Instant::now();
    let synth = synth_corpus(42, 200, 500, SynthMode::Synonym).map_err(|e| e.to_string())?;
    let built = build_corpus(&synth.sources, &synth.metadata, 2, DEFAULT_INJECT_BUDGET).map_err(|e| e.to_string())?;
    let (train, test) = holdout_split(&built.examples, 0.1);
    let profile = Profile::reference();
    let model =
        ScholarLm::init(profile.model.with_vocab(built.vocab.len()), profile.train.seed).map_err(|e| e.to_string())?;
    let mut trainer =
        Trainer::new(model, built.vocab.clone(), &synth.metadata, profile.train.clone()).map_err(|e| e.to_string())?;
    trainer.run(&train, |_| Control::Continue).map_err(|e| e.to_string())?;
    let model = trainer.model().clone();
    let embs = model
        .embed_references(&built.vocab, synth.metadata.entries(), profile.train.ref_budget)
        .map_err(|e| e.to_string())?;
    let meta_id = synth.metadata.metadata_id();
    let index = DenseIndex::build(&embs, build_checksum("reference", &meta_id)).map_err(|e| e.to_string())?;
    let queries = make_masked_queries(&test, &built.vocab);
    let dense = DenseRetriever::new(&model, &index, "reference", &meta_id);
    let bm25 = Bm25Retriever::new(&synth.metadata);
    let rs: [&dyn Retriever; 2] = [&dense, &bm25];
    let report = compare_retrievers(&queries, &rs, &[1, 3, 5, 10, 20]).map_err(|e| e.to_string())?;
    let n = synth.metadata.len();
    let all = make_masked_queries(&built.examples, &built.vocab);
    let full_depth = compare_retrievers(&all, &rs, &[1, 10, n]).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    Ok((Reference { synth, built, model, index, report, full_depth }, took))
}

fn c4_end_to_end(r: &Result<(Reference, Duration), String>) -> Outcome {
    let (r, took) = r.as_ref().map_err(Clone::clone)?;
    let get = |name: &str, k: usize| r.report.get(name, k).unwrap_or(f64::NAN);
    let (d1, d10, b1) = (get("dense", 1), get("dense", 10), get("bm25", 1));
    let summary = format!(
        "{} held-out queries, dense R@1 {d1:.3} R@10 {d10:.3}, bm25 R@1 {b1:.3} R@10 {:.3}, {:.0}s",
        r.report.queries,
        get("bm25", 10),
        took.as_secs_f64()
    );
    ensure!(d1 >= RECALL1_MIN && d10 >= RECALL10_MIN && b1 <= BM25_RECALL1_MAX, "{summary}");
    ensure!(*took <= BUDGET_C4, "{summary}: over the {}s budget", BUDGET_C4.as_secs());
    Ok(summary)
}

fn c5_recall_properties(r: &Result<(Reference, Duration), String>) -> Outcome {
    let (r, _) = r.as_ref().map_err(Clone::clone)?;
    ensure!(r.report.is_monotone() && r.full_depth.is_monotone(), "a recall column decreases in k");
    let n = r.synth.metadata.len();
    for name in ["dense", "bm25"] {
        let full = r.full_depth.get(name, n).unwrap_or(f64::NAN);
        ensure!(full == 1.0, "{name} recall@{n} = {full}");
    }

    // Gold ids of the masked queries are exactly the synthetic gold map.
    let queries = make_masked_queries(&r.built.examples, &r.built.vocab);
    let mut from_queries: Vec<(String, usize, String)> =
        queries.queries.iter().map(|q| (q.paper_id.clone(), q.event_index, q.gold_ref_id.clone())).collect();
    let mut gold: Vec<(String, usize, String)> =
        r.synth.gold.iter().map(|g| (g.paper_id.clone(), g.event_index, g.ref_id.clone())).collect();
    from_queries.sort();
    gold.sort();
    ensure!(queries.skipped == 0 && from_queries == gold, "masked queries disagree with the gold map");

    let meta_id = r.synth.metadata.metadata_id();
    let dense = DenseRetriever::new(&r.model, &r.index, "reference", &meta_id);
    let mut scanned = 0;
    for q in &queries.queries {
        let ex = r.built.examples.iter().find(|e| e.paper_id == q.paper_id).ok_or("query without example")?;
        let pos = ex.events[q.event_index].pos;
        ensure!(
            q.context.len() == pos && q.context[..] == ex.tokens[..pos],
            "{} #{}: context leaks",
            q.paper_id,
            q.event_index
        );
        // The dense query is a context suffix plus the event's own [RET].
        let dq = dense.query_tokens(&q.context);
        let (last, body) = dq.split_last().ok_or("empty dense query")?;
        ensure!(*last == RET && q.context.ends_with(body), "{} #{}: dense query leaks", q.paper_id, q.event_index);
        let tail = r.built.vocab.detokenize(&q.context);
        ensure!(tail.ends_with(&q.last_sentence), "{} #{}: lexical query leaks", q.paper_id, q.event_index);
        scanned += 1;
    }
    Ok(format!("2 reports monotone, recall@{n} = 1 for dense and bm25, {scanned} queries scanned with no leakage"))
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn c6_pipeline_fidelity() -> Outcome {
    let meta = MetadataIndex::load_jsonl(&fixtures().join("metadata.jsonl")).map_err(|e| e.to_string())?;
    let sources = read_sources(&fixtures().join("papers")).map_err(|e| e.to_string())?;
    ensure!(sources.len() == 20, "{} fixture papers", sources.len());
    let b = build_corpus(&sources, &meta, 1, DEFAULT_INJECT_BUDGET).map_err(|e| e.to_string())?;
    ensure!(b.failures.is_empty(), "parse failures: {:?}", b.failures);
    let fx01 = &b.records[0];
    ensure!(fx01.title == "A Nested Title for Diffusion Guidance", "nested title parsed as {:?}", fx01.title);
    let fx02_cites: Vec<&str> = b.records[1].cite_keys().collect();
    ensure!(fx02_cites == ["vaswani2017", "ba2016", "ba2016"], "multi-key cite parsed as {fx02_cites:?}");
    let fx13: Vec<SectionName> = b.records[12].sections.iter().map(|s| s.name).collect();
    ensure!(fx13 == [SectionName::Introduction, SectionName::RelatedWork], "sections {fx13:?}");

    let broken = read_sources(&fixtures().join("broken")).map_err(|e| e.to_string())?;
    let bb = build_corpus(&broken, &meta, 1, DEFAULT_INJECT_BUDGET).map_err(|e| e.to_string())?;
    ensure!(bb.records.is_empty() && bb.failures.len() == 2, "broken sources parsed: {:?}", bb.failures);

    let s = b.stats;
    ensure!(
        s.citations == 38 && s.titles_extracted == 38 && s.titles_matched == 33,
        "counted {} citations, {} extracted, {} matched",
        s.citations,
        s.titles_extracted,
        s.titles_matched
    );
    ensure!(s.match_percent() == FIXTURE_MATCH_PERCENT, "match rate {}%", s.match_percent());

    let text = examples_to_jsonl(&b.examples);
    let back = examples_from_jsonl(&text).map_err(|e| e.to_string())?;
    ensure!(back == b.examples && examples_to_jsonl(&back) == text, "examples do not round-trip");
    for r in &b.records {
        let again = parse_paper(&r.paper_id, &r.render_tex(), &r.render_bib()).map_err(|e| e.to_string())?;
        ensure!(again.title == r.title && again.sections == r.sections, "{} render-back differs", r.paper_id);
    }
    Ok(format!(
        "20 papers parsed, 2 broken rejected, {} of {} matched ({}%), {} bytes of examples round-trip",
        s.titles_matched,
        s.titles_extracted,
        s.match_percent(),
        text.len()
    ))
}

fn strip_ref_spans(ctx: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut inside = false;
    for &t in ctx {
        match t {
            REF_OPEN => inside = true,
            REF_CLOSE => inside = false,
            _ if !inside => out.push(t),
            _ => {}
        }
    }
    out
}

fn ref_spans(ctx: &[TokenId]) -> Vec<Vec<TokenId>> {
    let mut spans = Vec::new();
    let mut cur: Option<Vec<TokenId>> = None;
    for &t in ctx {
        match (t, cur.as_mut()) {
            (REF_OPEN, _) => cur = Some(Vec::new()),
            (REF_CLOSE, Some(_)) => spans.push(cur.take().expect("open span")),
            (_, Some(span)) => span.push(t),
            _ => {}
        }
    }
    spans
}

fn cite_keys(tex: &str) -> BTreeSet<String> {
    tex.match_indices("\\cite{")
        .filter_map(|(i, m)| {
            let rest = &tex[i + m.len()..];
            rest.find('}').map(|e| rest[..e].to_string())
        })
        .collect()
}

fn bib_keys(bib: &str) -> BTreeSet<String> {
    bib.lines().filter_map(|l| l.strip_prefix("@article{")).map(|l| l.trim_end_matches(',').to_string()).collect()
}

fn c7_orchestrator(r: &Result<(Reference, Duration), String>) -> Outcome {
    let (r, _) = r.as_ref().map_err(Clone::clone)?;
    let (vocab, meta) = (&r.built.vocab, &r.synth.metadata);
    let o = Orchestrator::new(&r.model, vocab, meta, &r.index).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut cites, mut spans_checked, mut greedy) = (0, 0, 0);
    for i in 0..AUTO_SESSIONS {
        let paper = &r.built.records[rng.random_range(0..r.built.records.len())];
        let mode = if i % 5 == 0 {
            greedy += 1;
            DecodeMode::Greedy
        } else {
            DecodeMode::Temperature { temperature: rng.random_range(0.6f32..1.4) }
        };
        let decode = DecodeConfig { mode, ..Default::default() };
        let seed = rng.random::<u64>();
        let budget = rng.random_range(20..120);
        let section = if i % 2 == 0 { SectionName::Introduction } else { SectionName::RelatedWork };
        let run = || -> Result<(SessionState, Vec<GenerationEvent>), String> {
            let mut s = SessionState::new(
                "acc",
                vocab,
                &paper.title,
                Some(&paper.abstract_text),
                section,
                decode.clone(),
                seed,
            )
            .map_err(|e| e.to_string())?;
            let events = o.run_auto(&mut s, budget).map_err(|e| e.to_string())?;
            Ok((s, events))
        };
        let (s, events) = run()?;
        ensure!(run()? == (s.clone(), events.clone()), "session {i} does not replay");
        ensure!(matches!(events.last(), Some(GenerationEvent::Done(_))), "session {i} did not finish");
        s.validate(vocab, meta).map_err(|e| e.to_string())?;
        let tex = export(&s, vocab, meta, ExportFormat::Tex).map_err(|e| e.to_string())?;
        let bib = export(&s, vocab, meta, ExportFormat::Bib).map_err(|e| e.to_string())?;
        ensure!(cite_keys(&tex) == bib_keys(&bib), "session {i}: cite keys differ from bib keys");
        cites += s.accepted.len();
        let mut stripped = s.clone();
        stripped.context = strip_ref_spans(&s.context);
        ensure!(
            export(&stripped, vocab, meta, ExportFormat::Tex).map_err(|e| e.to_string())? == tex,
            "session {i}: REF spans reach the export"
        );
        for span in ref_spans(&s.context) {
            let text = vocab.detokenize(&span);
            ensure!(span.len() < 4 || !tex.contains(&text), "session {i}: injected content appears in the export");
            spans_checked += 1;
        }
    }
    ensure!(cites > 0, "no session accepted a citation");

    // A context-independent greedy model makes the inject toggle the only difference.
    let word = (0..vocab.len() as TokenId)
        .find(|&t| vocab.is_generatable(t) && !vocab.is_special(t) && vocab.token(t) != Some("."))
        .ok_or("no plain word")?;
    let mut flat = r.model.clone();
    flat.params_mut().get_mut("lm_head.b").ok_or("lm_head.b")?.data_mut()[word as usize] = 1e4;
    let fo = Orchestrator::new(&flat, vocab, meta, &r.index).map_err(|e| e.to_string())?;
    let ids = meta.ref_ids();
    let mut toggles = 0;
    for trial in 0..10u64 {
        let script: Vec<usize> = (0..4).map(|_| rng.random_range(0..ids.len())).collect();
        let play = |inject: bool| -> Result<SessionState, String> {
            let decode = DecodeConfig { inject_content: inject, ..Default::default() };
            let mut s = SessionState::new(
                "t",
                vocab,
                "learning citation intent",
                None,
                SectionName::Introduction,
                decode,
                trial,
            )
            .map_err(|e| e.to_string())?;
            for &k in &script {
                fo.step(&mut s, 6).map_err(|e| e.to_string())?;
                fo.resolve_citation(&mut s, &CitationAction::Trigger).map_err(|e| e.to_string())?;
                fo.resolve_citation(&mut s, &CitationAction::AcceptExternal { ref_id: ids[k].clone() })
                    .map_err(|e| e.to_string())?;
                ensure!(s.status == Status::Generating, "unexpected status {:?}", s.status);
            }
            Ok(s)
        };
        let (on, off) = (play(true)?, play(false)?);
        ensure!(strip_ref_spans(&on.context) == off.context, "trial {trial}: toggle changed more than REF spans");
        ensure!(
            ref_spans(&on.context).len() == script.len() && !off.context.contains(&REF_OPEN),
            "trial {trial}: span count"
        );
        let tex = |s: &SessionState| export(s, vocab, meta, ExportFormat::Tex).map_err(|e| e.to_string());
        ensure!(tex(&on)? == tex(&off)?, "trial {trial}: exports differ");
        toggles += 1;
    }
    Ok(format!(
        "{AUTO_SESSIONS} auto sessions ({greedy} greedy) replay, {cites} citations with cite keys = bib keys, \
         {spans_checked} REF spans kept out of exports, {toggles} toggle trials differ by REF spans only"
    ))
}

const JUDGE_REPLY: &str = "[Detailed Evaluation]\n1. Content Relevance:\n- Key strengths: on topic\n\
- Areas for improvement: none\n- Score justification: close to the ground truth\n[End Evaluation]\n\n\
[Scores]\nRelevance: 4/5\nCoherence: 4/5\nAcademic: 3/5\nCompleteness: 3/5\nInnovation: 2/5\nTotal: 16/25\n[End Scores]\n";

/// Chat-completions stand-in on a loopback port; answers every request
/// with `reply` and counts requests.
fn mock_judge(reply: &'static str) -> (String, Arc<std::sync::atomic::AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().expect("addr");
    let hits = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().expect("clone"));
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            let req: Value = serde_json::from_slice(&body).unwrap_or_default();
            let prompt_ok = req["messages"][0]["content"].as_str().is_some_and(|p| p.contains("AI Generated Content:"));
            let content = if prompt_ok { reply } else { "missing prompt" };
            let out = json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                out.len()
            );
        }
    });
    (format!("http://{addr}/v1/chat/completions"), hits)
}

fn c8_judge() -> Outcome {
    let p = parse_scores(JUDGE_REPLY).map_err(|e| e.to_string())?;
    let sum: u32 = p.scores.components().iter().map(|&c| u32::from(c)).sum();
    ensure!(p.scores.components() == [4, 4, 3, 3, 2], "components {:?}", p.scores.components());
    ensure!(
        sum == p.stated_total && p.stated_total == 16 && p.warning.is_none(),
        "sum {sum} vs stated {}",
        p.stated_total
    );

    let malformed = [
        "no scores at all".to_string(),
        JUDGE_REPLY.replace("Coherence: 4/5\n", ""),
        JUDGE_REPLY.replace("Innovation: 2/5", "Innovation: 9/5"),
        JUDGE_REPLY.replace("Academic: 3/5", "Academic: good"),
        JUDGE_REPLY.replace("[End Scores]", ""),
    ];
    for (i, m) in malformed.iter().enumerate() {
        ensure!(matches!(parse_scores(m), Err(JudgeError::Parse { .. })), "malformed block {i} accepted");
    }

    let (url, hits) = mock_judge(JUDGE_REPLY);
    std::env::set_var("SCOPILOT_ACCEPTANCE_JUDGE_KEY", "local");
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
    let client = JudgeClient::new(JudgeConfig {
        endpoint: url,
        api_key_env: "SCOPILOT_ACCEPTANCE_JUDGE_KEY".into(),
        cache_dir: Some(cache.path().to_path_buf()),
        timeout_secs: 10,
        ..Default::default()
    });
    let input = JudgeInput {
        title: "Citation intent".into(),
        abstract_text: "We study retrieval during writing.".into(),
        ground_truth: "Prior work retrieves before writing.".into(),
        generated: "Retrieval tokens interleave with text.".into(),
    };
    let got = client.judge(&input).map_err(|e| e.to_string())?;
    ensure!(got == p, "round trip returned {got:?}");
    let again = client.judge(&input).map_err(|e| e.to_string())?;
    let n = hits.load(std::sync::atomic::Ordering::SeqCst);
    ensure!(again == p && n == 1, "cache miss: {n} requests");
    Ok(format!(
        "fixture {:?} sums to {sum}/25, {} malformed blocks rejected, loopback round trip plus cache hit",
        p.scores.components(),
        malformed.len()
    ))
}

struct Service {
    base: String,
    store: Arc<SessionStore>,
    agent: ureq::Agent,
}

fn start_service(resources: Arc<Resources>, sessions: &Path) -> Result<Service, String> {
    let store = Arc::new(SessionStore::open(sessions).map_err(|e| e.to_string())?);
    let state = AppState::new(resources, store.clone(), 4);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    listener.set_nonblocking(true).map_err(|e| e.to_string())?;
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime");
        rt.block_on(async move {
            let l = tokio::net::TcpListener::from_std(listener).expect("listener");
            axum::serve(l, router(state)).await.expect("serve");
        });
    });
    let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    Ok(Service { base: format!("http://{addr}"), store, agent })
}

impl Service {
    fn post(&self, path: &str, body: Value) -> Result<(u16, String), String> {
        let mut r = self
            .agent
            .post(&format!("{}{path}", self.base))
            .header("Content-Type", "application/json")
            .send(body.to_string())
            .map_err(|e| e.to_string())?;
        Ok((r.status().as_u16(), r.body_mut().read_to_string().map_err(|e| e.to_string())?))
    }

    fn last_event(&self, id: &str, n: usize) -> Result<Value, String> {
        let (_, text) = self.post(&format!("/v1/sessions/{id}/steps"), json!({ "max_new_tokens": n }))?;
        let last = text.lines().last().ok_or("empty stream")?;
        serde_json::from_str(last).map_err(|e| e.to_string())
    }
}

fn service_resources(dir: &Path, favour: Option<TokenId>) -> Result<Resources, String> {
    let c = synth_corpus(11, 12, 24, SynthMode::Keyword).map_err(|e| e.to_string())?;
    let built = build_corpus(&c.sources, &c.metadata, 1, DEFAULT_INJECT_BUDGET).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::desk(built.vocab.len());
    cfg.d_model = 32;
    cfg.d_ff = 64;
    let mut model = ScholarLm::init(cfg, 5).map_err(|e| e.to_string())?;
    if let Some(t) = favour {
        model.params_mut().get_mut("lm_head.b").ok_or("lm_head.b")?.data_mut()[t as usize] = 1e4;
    }
    let embs = model.embed_references(&built.vocab, c.metadata.entries(), 64).map_err(|e| e.to_string())?;
    let ckpt = dir.join("model.ckpt");
    let ckpt_id = Checkpoint::new(model, built.vocab).save(&ckpt).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("metadata.jsonl"), c.metadata.to_jsonl()).map_err(|e| e.to_string())?;
    let index =
        DenseIndex::build(&embs, build_checksum(&ckpt_id, &c.metadata.metadata_id())).map_err(|e| e.to_string())?;
    index.save(&dir.join("refs.idx")).map_err(|e| e.to_string())?;
    Resources::load(&ckpt, &dir.join("refs.idx"), &dir.join("metadata.jsonl")).map_err(|e| e.to_string())
}

fn first_word(v: &Vocabulary) -> Option<TokenId> {
    (0..v.len() as TokenId).find(|&t| v.is_generatable(t) && !v.is_special(t))
}

fn c9_service() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let plain = service_resources(dir.path(), None)?;
    let word = first_word(&plain.vocab).ok_or("no word")?;
    let res = Arc::new(service_resources(dir.path(), Some(word))?);
    let sessions = dir.path().join("sessions");
    let svc = start_service(res, &sessions)?;
    let paper = json!({ "title": "learning for models", "abstract": "we study methods", "seed": 1 });

    // Fault injection on session writes.
    let (code, text) = svc.post("/v1/sessions", paper.clone())?;
    ensure!(code == 201, "create returned {code}: {text}");
    let id = serde_json::from_str::<Value>(&text).map_err(|e| e.to_string())?["session_id"]
        .as_str()
        .ok_or("no id")?
        .to_string();
    let file = svc.store.path_of(&id);
    for fault in [WriteFault::TruncatedTemp, WriteFault::BeforeRename] {
        let before = std::fs::read(&file).map_err(|e| e.to_string())?;
        svc.store.inject_fault(Some(fault));
        let last = svc.last_event(&id, 3)?;
        ensure!(last["kind"] == "error", "{fault:?}: stream ended with {last}");
        ensure!(std::fs::read(&file).map_err(|e| e.to_string())? == before, "{fault:?}: session file changed");
    }
    svc.store.inject_fault(Some(WriteFault::TruncatedTemp));
    let (code, _) = svc.post("/v1/sessions", paper.clone())?;
    ensure!(code == 500, "faulty create returned {code}");
    let mut files = 0;
    for entry in std::fs::read_dir(&sessions).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|e| e == "json") {
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            serde_json::from_slice::<Value>(&bytes).map_err(|e| format!("{} is corrupt: {e}", p.display()))?;
            files += 1;
        }
    }
    let reopened = SessionStore::open(&sessions).map_err(|e| e.to_string())?;
    ensure!(reopened.len() == 1 && files == 1, "{files} session files, {} reopened", reopened.len());
    ensure!(svc.last_event(&id, 3)?["kind"] == "done", "session unusable after faults");

    // Two concurrent step requests on one session.
    let (_, text) = svc.post("/v1/sessions", paper)?;
    let id = serde_json::from_str::<Value>(&text).map_err(|e| e.to_string())?["session_id"]
        .as_str()
        .ok_or("no id")?
        .to_string();
    let gate = Barrier::new(2);
    let codes: Vec<u16> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..2)
            .map(|_| {
                scope.spawn(|| {
                    gate.wait();
                    svc.post(&format!("/v1/sessions/{id}/steps"), json!({ "max_new_tokens": 240 }))
                        .map(|(c, _)| c)
                        .unwrap_or(0)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or(0)).collect()
    });
    let ok = codes.iter().filter(|&&c| c == 200).count();
    let conflict = codes.iter().filter(|&&c| c == 409).count();
    ensure!(ok == 1 && conflict == 1, "concurrent step codes {codes:?}");
    Ok(format!(
        "2 injected write faults left {files} intact session file, concurrent steps gave {codes:?}; \
         criteria 1-8 ran with no secondary component built"
    ))
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match &outcome {
        Ok(detail) => println!("criterion {n}: PASS {name}: {detail}"),
        Err(why) => println!("criterion {n}: FAIL {name}: {why}"),
    }
    outcome.is_ok()
}

fn main() {
    // `cargo test -- --list` style probes expect no work.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= report(1, "loss identities", c1_loss_identities);
    ok &= report(2, "gradient correctness", c2_gradients);
    ok &= report(3, "retrieval exactness", c3_retrieval_exactness);
    let reference = catch_unwind(reference_run).unwrap_or_else(|_| Err("reference run panicked".into()));
    ok &= report(4, "end-to-end learning", || c4_end_to_end(&reference));
    ok &= report(5, "recall properties", || c5_recall_properties(&reference));
    ok &= report(6, "pipeline fidelity", c6_pipeline_fidelity);
    ok &= report(7, "orchestrator contracts", || c7_orchestrator(&reference));
    ok &= report(8, "judge client", c8_judge);
    ok &= report(9, "service", c9_service);
    if !ok {
        std::process::exit(1);
    }
}
