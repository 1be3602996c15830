use std::path::PathBuf;

use scopilot_core::corpus::{
    build_corpus, examples_from_jsonl, examples_to_jsonl, load_built, parse_paper, read_sources, BuiltCorpus,
    MetadataIndex, SectionName,
};

use SectionName::{Introduction as I, RelatedWork as R};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn metadata() -> MetadataIndex {
    MetadataIndex::load_jsonl(&fixtures().join("metadata.jsonl")).unwrap()
}

fn built() -> BuiltCorpus {
    let sources = read_sources(&fixtures().join("papers")).unwrap();
    build_corpus(&sources, &metadata(), 1, 64).unwrap()
}

struct Expect {
    id: &'static str,
    title: &'static str,
    sections: &'static [SectionName],
    cites: &'static [&'static str],
    /// (bib key, matched ref id) in bibliography order.
    bib: &'static [(&'static str, Option<&'static str>)],
}

#[rustfmt::skip]
const EXPECTED: &[Expect] = &[
    Expect { id: "fx01", title: "A Nested Title for Diffusion Guidance", sections: &[I], cites: &["ddpm2020", "freeu2023"], bib: &[("freeu2023", Some("r01")), ("ddpm2020", Some("r02"))] },
    Expect { id: "fx02", title: "Protected Capitals in Sequence Models", sections: &[I, R], cites: &["vaswani2017", "ba2016", "ba2016"], bib: &[("vaswani2017", Some("r03")), ("ba2016", Some("r04"))] },
    Expect { id: "fx03", title: "Tooling Notes", sections: &[I], cites: &["hflib", "bert2019"], bib: &[("hflib", None), ("bert2019", Some("r05"))] },
    Expect { id: "fx04", title: "Deep Networks and Their Optimizers", sections: &[I], cites: &["he2016", "kingma2015"], bib: &[("he2016", Some("r06")), ("kingma2015", Some("r07"))] },
    Expect { id: "fx05", title: "Retrieval for Open Questions", sections: &[R], cites: &["karpukhin2020", "lewis2020"], bib: &[("karpukhin2020", Some("r08")), ("lewis2020", Some("r09"))] },
    Expect { id: "fx06", title: "Sparse Ranking Revisited", sections: &[I], cites: &["robertson2009", "robertson1994"], bib: &[("robertson2009", Some("r10")), ("robertson1994", Some("r11"))] },
    Expect { id: "fx07", title: "How Authors Cite", sections: &[I], cites: &["note2021", "brown2020"], bib: &[("note2021", None), ("brown2020", Some("r12"))] },
    Expect { id: "fx08", title: "Recommending Citations", sections: &[I, R], cites: &["ncr", "bhagavatula2018", "ncr"], bib: &[("ncr", None), ("bhagavatula2018", Some("r15"))] },
    Expect { id: "fx09", title: "Contrastive Objectives", sections: &[I], cites: &["oord2018", "chen2020"], bib: &[("oord2018", Some("r16")), ("chen2020", Some("r17"))] },
    Expect { id: "fx10", title: "Momentum Encoders", sections: &[I], cites: &["he2020", "hadsell2006"], bib: &[("he2020", Some("r18")), ("hadsell2006", Some("r19"))] },
    Expect { id: "fx11", title: "Encoder Decoder Translation", sections: &[I], cites: &["arxivlist", "sutskever2014"], bib: &[("arxivlist", None), ("sutskever2014", Some("r20"))] },
    Expect { id: "fx12", title: "Alignment and Memory", sections: &[R], cites: &["bahdanau2015", "hochreiter1997"], bib: &[("bahdanau2015", Some("r21")), ("hochreiter1997", Some("r22"))] },
    Expect { id: "fx13", title: "Word Vectors", sections: &[I, R], cites: &["mikolov2013", "pennington2014"], bib: &[("mikolov2013", Some("r23")), ("pennington2014", Some("r24"))] },
    Expect { id: "fx14", title: "Exact and Approximate Search", sections: &[I], cites: &["johnson2019", "jegou2011"], bib: &[("johnson2019", Some("r25")), ("jegou2011", Some("r26"))] },
    Expect { id: "fx15", title: "Tools for Language Models", sections: &[I], cites: &["schick2023", "yao2023"], bib: &[("schick2023", Some("r27")), ("yao2023", Some("r28"))] },
    Expect { id: "fx16", title: "Adaptive Retrieval", sections: &[I], cites: &["asai2024", "jiang2023"], bib: &[("asai2024", Some("r29")), ("jiang2023", Some("r30"))] },
    Expect { id: "fx17", title: "Retrieval at Trillion Scale", sections: &[I], cites: &["pwc", "borgeaud2022"], bib: &[("pwc", None), ("borgeaud2022", Some("r31"))] },
    Expect { id: "fx18", title: "Memory Augmented Pretraining", sections: &[I], cites: &["guu2020", "khandelwal2020"], bib: &[("guu2020", Some("r32")), ("khandelwal2020", Some("r33"))] },
    Expect { id: "fx19", title: "A Survey of Citation Recommendation", sections: &[I], cites: &["farber2020"], bib: &[("farber2020", Some("r34"))] },
    Expect { id: "fx20", title: "Scientific Text Encoders", sections: &[I], cites: &["beltagy2019"], bib: &[("beltagy2019", Some("r35"))] },
];

#[test]
fn every_fixture_parses_as_expected() {
    let b = built();
    assert!(b.failures.is_empty(), "{:?}", b.failures);
    assert_eq!(b.records.len(), EXPECTED.len());
    for (r, e) in b.records.iter().zip(EXPECTED) {
        assert_eq!(r.paper_id, e.id);
        assert_eq!(r.title, e.title, "{}", e.id);
        let names: Vec<_> = r.sections.iter().map(|s| s.name).collect();
        assert_eq!(names, e.sections, "{}", e.id);
        assert_eq!(r.cite_keys().collect::<Vec<_>>(), e.cites, "{}", e.id);
        let bib: Vec<_> = r.bib_entries.iter().map(|b| (b.key.as_str(), b.matched_ref_id.as_deref())).collect();
        assert_eq!(bib, e.bib, "{}", e.id);
    }
}

#[test]
fn subset_details() {
    let b = built();
    let rec = |id: &str| b.records.iter().find(|r| r.paper_id == id).unwrap();
    let title = |id: &str, key: &str| rec(id).bib(key).unwrap().extracted_title.clone().unwrap();

    assert_eq!(title("fx01", "freeu2023"), "FreeU: Free Lunch in Diffusion U-Net");
    assert_eq!(title("fx02", "vaswani2017"), "Attention Is All You Need");
    assert_eq!(title("fx02", "ba2016"), "Layer Normalization");
    assert_eq!(title("fx11", "arxivlist"), "https://arxiv.org/list/cs.CL");
    assert_eq!(title("fx17", "pwc"), "https://paperswithcode.com");
    assert_eq!(rec("fx04").abstract_text, "Residual connections and adaptive steps make depth trainable.");
    assert_eq!(rec("fx09").bib_entries.len(), 2, "@string and @comment blocks are skipped");
    let fx10: String = rec("fx10").sections[0]
        .body
        .iter()
        .filter_map(|i| match i {
            scopilot_core::corpus::Inline::Text(t) => Some(t.as_str()),
            _ => None,
        })
        .collect();
    assert!(fx10.contains("Also called slow encoders."), "{fx10}");
    assert!(!fx10.contains("footnote"));
}

#[test]
fn broken_sources_fail_to_parse() {
    let sources = read_sources(&fixtures().join("broken")).unwrap();
    let b = build_corpus(&sources, &metadata(), 1, 64).unwrap();
    assert!(b.records.is_empty());
    let reasons: Vec<_> = b.failures.iter().map(|(id, why)| format!("{id}: {why}")).collect();
    assert_eq!(b.failures.len(), 2, "{reasons:?}");
    assert!(reasons.iter().any(|r| r.starts_with("nobib") && r.contains("empty bibliography")), "{reasons:?}");
    assert!(reasons.iter().any(|r| r.starts_with("untitled") && r.contains("title")), "{reasons:?}");
}

#[test]
fn stats_report_thirty_three_of_thirty_eight() {
    let s = built().stats;
    assert_eq!((s.papers_seen, s.papers_parsed), (20, 20));
    assert_eq!(s.citations, 38);
    assert_eq!(s.titles_extracted, 38);
    assert_eq!(s.titles_matched, 33);
    assert_eq!(s.match_rate, 33.0 / 38.0);
    assert_eq!(s.match_percent(), 87);
    assert!(s.to_string().ends_with("titles: 38 extracted, 33 matched (87%)"), "{s}");
}

#[test]
fn events_follow_matched_marks_only() {
    let b = built();
    let events: Vec<usize> = b.examples.iter().map(|e| e.events.len()).collect();
    // Matched cite marks per paper, counted by hand from the sources.
    assert_eq!(events, [2, 3, 1, 2, 2, 2, 1, 1, 2, 2, 1, 2, 2, 2, 2, 2, 1, 2, 1, 1]);
    let meta = metadata();
    for ex in &b.examples {
        ex.validate(&b.vocab, &meta).unwrap();
    }
}

#[test]
fn examples_round_trip_bit_identically() {
    let b = built();
    let text = examples_to_jsonl(&b.examples);
    let back = examples_from_jsonl(&text).unwrap();
    assert_eq!(back, b.examples);
    assert_eq!(examples_to_jsonl(&back), text);

    let dir = tempfile::tempdir().unwrap();
    b.write(dir.path(), &metadata()).unwrap();
    let on_disk = std::fs::read(dir.path().join("examples.jsonl")).unwrap();
    assert_eq!(on_disk, text.as_bytes());
    let (vocab, examples, meta) = load_built(dir.path()).unwrap();
    assert_eq!(examples, b.examples);
    assert_eq!(vocab, b.vocab);
    assert_eq!(meta.to_jsonl(), metadata().to_jsonl());
}

#[test]
fn render_back_is_a_fixed_point_on_fixtures() {
    for r in built().records {
        let once = parse_paper(&r.paper_id, &r.render_tex(), &r.render_bib()).unwrap();
        let mut unmatched = r.clone();
        for b in &mut unmatched.bib_entries {
            b.matched_ref_id = None;
        }
        assert_eq!(once, unmatched, "{}", r.paper_id);
    }
}
