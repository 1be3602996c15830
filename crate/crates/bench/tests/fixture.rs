use scopilot_bench::fixture;

#[test]
fn fixture_is_consistent() {
    let f = fixture(12, 30);
    assert_eq!(f.model.config().vocab_size, f.vocab.len());
    assert_eq!(f.metadata.len(), 30);
    assert_eq!(f.examples.len(), 12);
    for e in &f.examples {
        e.validate(&f.vocab, &f.metadata).unwrap();
    }
}
