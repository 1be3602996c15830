//! Trains the reference profile on a synonym-mode synthetic corpus and prints
//! dense and BM25 recall on the held-out papers.

use std::time::Instant;

use scopilot_core::corpus::{build_corpus, holdout_split, synth_corpus, SynthMode, DEFAULT_INJECT_BUDGET};
use scopilot_core::evalkit::{compare_retrievers, make_masked_queries, Bm25Retriever, DenseRetriever, Retriever};
use scopilot_core::index::{build_checksum, DenseIndex};
use scopilot_core::model::ScholarLm;
use scopilot_core::trainer::{Control, Profile, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let t0 = Instant::now();
    let synth = synth_corpus(42, 200, 500, SynthMode::Synonym).expect("synth");
    let built = build_corpus(&synth.sources, &synth.metadata, 2, DEFAULT_INJECT_BUDGET).expect("corpus");
    let (train, test) = holdout_split(&built.examples, 0.1);
    let mut profile = Profile::reference();
    profile.train.epochs = epochs;
    let model = ScholarLm::init(profile.model.with_vocab(built.vocab.len()), profile.train.seed).expect("init");
    let mut trainer =
        Trainer::new(model, built.vocab.clone(), &synth.metadata, profile.train.clone()).expect("trainer");
    let summaries = trainer
        .run(&train, |m| {
            if m.batch == 0 {
                eprintln!(
                    "epoch {} step {} L_g {:.3} L_r {:.3} t={:.0}s",
                    m.epoch,
                    m.step,
                    m.l_g,
                    m.l_r,
                    t0.elapsed().as_secs_f64()
                );
            }
            Control::Continue
        })
        .expect("train");
    eprintln!("{} epochs in {:.0}s", summaries.len(), t0.elapsed().as_secs_f64());
    let model = trainer.model();
    let embs = model.embed_references(&built.vocab, synth.metadata.entries(), profile.train.ref_budget).expect("embed");
    let ckpt_id = "run";
    let meta_id = synth.metadata.metadata_id();
    let index = DenseIndex::build(&embs, build_checksum(ckpt_id, &meta_id)).expect("index");
    let queries = make_masked_queries(&test, &built.vocab);
    let dense = DenseRetriever::new(model, &index, ckpt_id, &meta_id);
    let bm25 = Bm25Retriever::new(&synth.metadata);
    let rs: [&dyn Retriever; 2] = [&dense, &bm25];
    let report = compare_retrievers(&queries, &rs, &[1, 5, 10]).expect("report");
    println!("{}", report.render());
    eprintln!("total {:.0}s", t0.elapsed().as_secs_f64());
}
