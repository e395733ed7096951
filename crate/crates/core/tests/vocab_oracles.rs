use proptest::prelude::*;
use v2c_core::embkit::EmbeddingMatrix;
use v2c_core::vocab::{
    self, ConceptCatalog, ConceptKind, LeakageMode, LexEntry, Lexicon, PosTags, RelationSet,
};

fn lexicon(items: &[(&str, &str)]) -> Lexicon {
    let text: String = items
        .iter()
        .enumerate()
        .map(|(i, (w, p))| format!("{w}\t{}\t{p}\n", i + 1))
        .collect();
    Lexicon::parse(text.as_bytes()).unwrap()
}

fn texts(c: &ConceptCatalog) -> Vec<String> {
    c.texts().map(str::to_owned).collect()
}

#[test]
fn bigram_cap_keeps_lowest_rank_sums() {
    let lex = lexicon(&[
        ("red", "ADJ"),
        ("head", "NOUN"),
        ("big", "ADJ"),
        ("wing", "NOUN"),
        ("tail", "NOUN"),
    ]);
    let b = vocab::build_bigrams(&lex, 2, 3, 4).unwrap();
    assert_eq!(texts(&b), ["red head", "red wing", "big head", "red tail"]);
    assert!(b.concepts().iter().all(|c| c.kind == ConceptKind::Bigram));
}

#[test]
fn trigrams_match_brute_force_on_two_by_two_by_two() {
    let lex = lexicon(&[
        ("small", "ADJ"),
        ("beak", "NOUN"),
        ("long", "ADJ"),
        ("leg", "NOUN"),
    ]);
    let rels = RelationSet::new(["with", "without"]);
    let got = vocab::build_trigrams(&lex, &rels, 2, 2, 8).unwrap();
    let mut all = Vec::new();
    for (ri, r) in ["with", "without"].iter().enumerate() {
        for (a, ar) in [("small", 1), ("long", 3)] {
            for (n, nr) in [("beak", 2), ("leg", 4)] {
                all.push((ri + 1 + ar + nr, ri + 1, ar, nr, format!("{r} {a} {n}")));
            }
        }
    }
    all.sort();
    let want: Vec<String> = all.into_iter().map(|t| t.4).collect();
    assert_eq!(texts(&got), want);
    let capped = vocab::build_trigrams(&lex, &rels, 2, 2, 3).unwrap();
    assert_eq!(texts(&capped), want[..3]);
}

#[test]
fn leakage_phrase_and_token_modes() {
    let names = vec!["Red Fox".to_owned()];
    assert!(vocab::mentions_class(
        "a red fox den",
        &names,
        LeakageMode::Phrase
    ));
    assert!(!vocab::mentions_class(
        "red fur",
        &names,
        LeakageMode::Phrase
    ));
    assert!(vocab::mentions_class("red fur", &names, LeakageMode::Token));
    assert!(!vocab::mentions_class(
        "foxglove",
        &names,
        LeakageMode::Token
    ));
    let cat = ConceptCatalog::from_texts(
        ["fox tail", "red fox", "green leaf"].map(|t| (t, ConceptKind::Bigram)),
    )
    .unwrap();
    let kept = vocab::remove_class_leakage(&cat, &names, LeakageMode::Phrase).unwrap();
    assert_eq!(texts(&kept), ["fox tail", "green leaf"]);
    assert_eq!(kept.concepts()[1].id, 1);
}

#[test]
fn embeddings_join_by_text_in_any_order() {
    let store = EmbeddingMatrix::new(
        2,
        vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8],
        vec!["beak".into(), "wing".into(), "unused".into()],
    )
    .unwrap();
    let cat =
        ConceptCatalog::from_texts([("wing", ConceptKind::Atomic), ("beak", ConceptKind::Atomic)])
            .unwrap()
            .with_embeddings_by_text(&store)
            .unwrap();
    let e = cat.embeddings().unwrap();
    assert_eq!(e.row(0), &[0.0, 1.0]);
    assert_eq!(e.row(1), &[1.0, 0.0]);

    let missing = ConceptCatalog::from_texts([("tail", ConceptKind::Atomic)])
        .unwrap()
        .with_embeddings_by_text(&store);
    assert!(missing.is_err());
}

fn arb_lexicon() -> impl Strategy<Value = Lexicon> {
    prop::collection::vec((any::<bool>(), any::<bool>()), 2..12).prop_map(|tags| {
        let entries = tags
            .into_iter()
            .enumerate()
            .map(|(i, (adj, noun))| LexEntry {
                word: format!("w{i}"),
                rank: i as u32 + 1,
                pos: PosTags {
                    adj,
                    noun,
                    other: !(adj || noun),
                },
            })
            .collect();
        Lexicon::new(entries).unwrap()
    })
}

fn top(lex: &Lexicon, n: usize, pick: impl Fn(&LexEntry) -> bool) -> Vec<&LexEntry> {
    lex.entries().iter().filter(|e| pick(e)).take(n).collect()
}

proptest! {
    #[test]
    fn bigrams_match_exhaustive_sort(lex in arb_lexicon(), max_adj in 1usize..6, max_noun in 1usize..6, cap in 0usize..40) {
        let adjs = top(&lex, max_adj, |e| e.pos.adj);
        let nouns = top(&lex, max_noun, |e| e.pos.noun);
        prop_assume!(!adjs.is_empty() && !nouns.is_empty());
        let mut all = Vec::new();
        for a in &adjs {
            for n in &nouns {
                if a.word != n.word {
                    all.push((a.rank + n.rank, a.rank, n.rank, format!("{} {}", a.word, n.word)));
                }
            }
        }
        all.sort();
        all.truncate(cap);
        let want: Vec<String> = all.into_iter().map(|t| t.3).collect();
        let got = vocab::build_bigrams(&lex, max_adj, max_noun, cap).unwrap();
        prop_assert_eq!(texts(&got), want);
    }

    #[test]
    fn trigrams_match_exhaustive_sort(lex in arb_lexicon(), n_rels in 1usize..4, cap in 0usize..60) {
        let rels: Vec<String> = (0..n_rels).map(|i| format!("r{i}")).collect();
        let adjs = top(&lex, 4, |e| e.pos.adj);
        let nouns = top(&lex, 4, |e| e.pos.noun);
        prop_assume!(!adjs.is_empty() && !nouns.is_empty());
        let mut all = Vec::new();
        for (ri, r) in rels.iter().enumerate() {
            let rr = ri as u32 + 1;
            for a in &adjs {
                for n in &nouns {
                    if a.word != n.word {
                        all.push((rr + a.rank + n.rank, rr, a.rank, n.rank, format!("{r} {} {}", a.word, n.word)));
                    }
                }
            }
        }
        all.sort();
        all.truncate(cap);
        let want: Vec<String> = all.into_iter().map(|t| t.4).collect();
        let got = vocab::build_trigrams(&lex, &RelationSet::new(rels), 4, 4, cap).unwrap();
        prop_assert_eq!(texts(&got), want);
    }

    #[test]
    fn atomic_is_rank_prefix(lex in arb_lexicon(), n in 1usize..20) {
        let got = vocab::build_atomic(&lex, n).unwrap();
        let want: Vec<String> = lex.entries().iter().take(n).map(|e| e.word.clone()).collect();
        prop_assert_eq!(texts(&got), want);
    }
}
