use proptest::prelude::*;
use serde_json::Value;
use unicode_normalization::UnicodeNormalization;

use tailink::backend::{Backend, FixtureEntry, ReplayBackend};
use tailink::benchmark::{parse_benchmark, Benchmark, BenchmarkFormat, BenchmarkSentence, GoldMention};
use tailink::kb::{normalize_title, MappingIndex};
use tailink::parser::{parse_predictions, ParseStatus};
use tailink::popularity::{stratify, MissingCounts, PopularityIndex, Theta};
use tailink::predictions::{LinkRecord, PredictionRecord, RecordStatus};
use tailink::prompt::{build_prompt, PromptTemplate};
use tailink::scorer::{score, MatchConfig, MatchMode, NilPolicy};

fn title_oracle(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let spaced = nfc.replace('_', " ");
    let collapsed = spaced.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut chars = collapsed.chars();
    let cased = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect::<String>(),
        None => String::new(),
    };
    cased.nfc().collect()
}

fn title_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            Just("a".to_string()),
            Just("é".to_string()),
            Just("e\u{301}".to_string()),
            Just("_".to_string()),
            Just(" ".to_string()),
            Just("\t".to_string()),
            Just("ß".to_string()),
            Just("ǆ".to_string()),
            Just("Ω".to_string()),
            "[a-zA-Z0-9' ()-]{1,4}",
            any::<char>().prop_map(String::from),
        ],
        0..12,
    )
    .prop_map(|parts| parts.concat())
}

fn links_json(links: &[(String, String)]) -> String {
    let map: serde_json::Map<String, Value> = links
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    serde_json::to_string(&serde_json::json!([{"Entities": map}])).unwrap()
}

fn pair_strategy() -> impl Strategy<Value = (String, String)> {
    ("[A-Za-z\"\\\\é ]{1,6}", "[A-Za-z\"\\\\é ]{1,6}")
        .prop_filter("non-blank", |(k, v)| !k.trim().is_empty() && !v.trim().is_empty())
}

proptest! {
    #[test]
    fn normalize_is_idempotent_and_matches_rules(raw in title_strategy()) {
        let once = normalize_title(&raw);
        let twice = normalize_title(once.as_str());
        prop_assert_eq!(twice.as_str(), once.as_str());
        prop_assert_eq!(once.as_str(), title_oracle(&raw));
    }

    #[test]
    fn clean_path_agrees_with_reference_parser(pairs in prop::collection::vec(pair_strategy(), 0..6)) {
        let raw = links_json(&pairs);
        let out = parse_predictions(&raw);
        prop_assert_eq!(out.status, ParseStatus::Clean);
        let reference: Value = serde_json::from_str(&raw).unwrap();
        let expected: Vec<(String, String)> = reference[0]["Entities"]
            .as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_str().unwrap().to_string()))
            .collect();
        let got: Vec<(String, String)> = out.links.iter().map(|l| (l.surface.clone(), l.title.clone())).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn canonical_reserialization_is_a_fixpoint(raw in "[\\[\\]{}\",:A-Za-z ]{0,60}") {
        let first = parse_predictions(&raw);
        if first.status != ParseStatus::Unparseable {
            let again = parse_predictions(&first.to_canonical_json());
            prop_assert_eq!(again.status, ParseStatus::Clean);
            prop_assert_eq!(again.links.len(), first.links.len());
            for (a, b) in again.links.iter().zip(&first.links) {
                prop_assert_eq!((&a.surface, &a.title), (&b.surface, &b.title));
            }
        } else {
            prop_assert!(first.links.is_empty());
        }
    }

    #[test]
    fn repair_never_fabricates(
        parts in prop::collection::vec(
            prop_oneof![
                Just("["), Just("]"), Just("{"), Just("}"), Just(","), Just(":"),
                Just("\"Entities\""), Just("\"a\""), Just("\"b\""), Just("\"Rossint\""),
                Just("\"Gioachino Rossini\""), Just("Sure! "), Just("null"), Just("3"),
            ],
            0..30,
        )
    ) {
        let raw = parts.concat();
        let out = parse_predictions(&raw);
        for link in &out.links {
            let pair = format!("\"{}\":\"{}\"", link.surface, link.title);
            prop_assert!(raw.contains(&pair), "{pair} not in {raw}");
        }
    }

    #[test]
    fn parser_never_panics(raw in any::<String>()) {
        let out = parse_predictions(&raw);
        if out.status == ParseStatus::Unparseable {
            prop_assert!(out.links.is_empty());
        }
    }

    #[test]
    fn prompt_is_injective_and_holds_sentence_once(a in "[^\"]{0,40}", b in "[^\"]{0,40}") {
        let t = PromptTemplate::default();
        let (pa, pb) = (build_prompt(&t, &a), build_prompt(&t, &b));
        prop_assert_eq!(pa == pb, a == b);
        let slot = format!("Sentence:\"{a}\"\nOutput:");
        prop_assert!(pa.ends_with(&slot));
        prop_assert_eq!(pa.matches(&slot).count(), 1);
    }

    #[test]
    fn replay_is_pure(prompts in prop::collection::btree_set("[a-z]{1,8}", 1..6), probe in "[A-Z]{1,8}") {
        let entries: Vec<FixtureEntry> = prompts.iter().map(|p| FixtureEntry::new(p, &p.to_uppercase(), "m")).collect();
        let replay = ReplayBackend::from_entries(entries, "m");
        for p in &prompts {
            let first = replay.complete(p).unwrap();
            let second = replay.complete(p).unwrap();
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(first.raw_text, p.to_uppercase());
        }
        prop_assert_eq!(replay.complete(&probe).unwrap_err().code(), "replay-miss");
    }
}

const QIDS: [&str; 6] = ["Q1", "Q2", "Q3", "Q4", "Q5", "Q6"];

fn instance() -> impl Strategy<Value = (Benchmark, Vec<PredictionRecord>)> {
    let sentence = (
        prop::collection::vec((0usize..7, 0usize..3), 0..4),
        prop::collection::vec((0usize..7, 0usize..3), 0..5),
    );
    prop::collection::vec(sentence, 1..5).prop_map(|sentences| {
        let mut bench = Benchmark::default();
        let mut preds = Vec::new();
        for (i, (gold, pred)) in sentences.into_iter().enumerate() {
            let id = format!("s{i}");
            let surf = |k: usize| ["x", "y", "z"][k].to_string();
            bench.sentences.push(BenchmarkSentence {
                sentence_id: id.clone(),
                text: "x y z".into(),
                mentions: gold
                    .iter()
                    .map(|&(q, s)| GoldMention::new(surf(s), QIDS.get(q).copied().unwrap_or("NIL"), "T"))
                    .collect(),
            });
            preds.push(PredictionRecord {
                sentence_id: id,
                links: pred
                    .iter()
                    .map(|&(q, s)| LinkRecord::with_qid(surf(s), QIDS.get(q).and_then(|q| tailink::kb::Qid::parse(q))))
                    .collect(),
                status: RecordStatus::Clean,
                error: None,
            });
        }
        (bench, preds)
    })
}

fn counts_index() -> PopularityIndex {
    PopularityIndex::from_counts(
        QIDS.iter()
            .zip([5u64, 15, 25, 35, 45, 55])
            .map(|(q, c)| (tailink::kb::Qid::parse(q).unwrap(), c)),
    )
}

proptest! {
    #[test]
    fn score_is_permutation_invariant((bench, preds) in instance(), seed in any::<u64>()) {
        let cfg = MatchConfig::new(MatchMode::Qid);
        let base = score("s", &bench, &preds, &cfg, None).unwrap();
        let mut b2 = bench.clone();
        let mut p2 = preds.clone();
        b2.sentences.reverse();
        let shift = (seed as usize) % p2.len().max(1);
        p2.rotate_left(shift);
        for p in &mut p2 {
            p.links.reverse();
        }
        let other = score("s", &b2, &p2, &cfg, None).unwrap();
        prop_assert_eq!((base.tp, base.fp, base.fn_), (other.tp, other.fp, other.fn_));
    }

    #[test]
    fn adding_predictions_is_monotone((bench, preds) in instance(), pick in 0usize..5) {
        let cfg = MatchConfig { mode: MatchMode::Qid, nil_policy: NilPolicy::ExcludeGoldOnly };
        let base = score("s", &bench, &preds, &cfg, None).unwrap();
        let i = pick % bench.sentences.len();
        let mut more = preds.clone();
        more[i].links.push(LinkRecord::with_qid("w", tailink::kb::Qid::parse("Q999")));
        let wrong = score("s", &bench, &more, &cfg, None).unwrap();
        prop_assert_eq!(wrong.tp, base.tp);
        prop_assert_eq!(wrong.fp, base.fp + 1);
        prop_assert_eq!(wrong.fn_, base.fn_);
        if let Some(m) = bench.sentences[i].mentions.iter().find(|m| !m.is_nil()) {
            let mut right = preds.clone();
            right[i].links.push(LinkRecord::with_qid("w", tailink::kb::Qid::parse(&m.qid)));
            let r = score("s", &bench, &right, &cfg, None).unwrap();
            prop_assert!(r.tp >= base.tp);
            prop_assert!(r.tp + r.fn_ == base.tp + base.fn_);
        }
    }

    #[test]
    fn stratification_is_monotone_and_converges((bench, preds) in instance()) {
        let cfg = MatchConfig::new(MatchMode::Qid);
        let thetas = [Theta::Finite(10), Theta::Finite(30), Theta::Finite(50), Theta::Infinite];
        let st = stratify("s", &bench, &preds, &cfg, None, &counts_index(), &thetas, MissingCounts::Strict).unwrap();
        for w in st.slices.windows(2) {
            prop_assert!(w[0].retained_gold <= w[1].retained_gold);
        }
        let mut full = score("s", &bench, &preds, &cfg, None).unwrap();
        let mut last = st.slices.last().unwrap().report.clone();
        full.slice_id.clear();
        last.slice_id.clear();
        prop_assert_eq!(last, full);
    }

    #[test]
    fn benchmark_jsonl_roundtrip(
        rows in prop::collection::vec(
            (prop::collection::vec("[a-zé]{1,5}", 1..6), prop::collection::vec((0usize..6, 0usize..7), 0..3)),
            0..6,
        )
    ) {
        let mut bench = Benchmark { name: "b".into(), sentences: Vec::new() };
        for (i, (words, mentions)) in rows.iter().enumerate() {
            let text = words.join(" ");
            let mut ms = Vec::new();
            for &(w, q) in mentions {
                let w = w % words.len();
                let start: usize = words[..w].iter().map(|x| x.chars().count() + 1).sum();
                let surface = words[w].clone();
                let end = start + surface.chars().count();
                let mut m = GoldMention::new(surface, QIDS.get(q).copied().unwrap_or("NIL"), "Person");
                m.char_start = Some(start);
                m.char_end = Some(end);
                ms.push(m);
            }
            bench.sentences.push(BenchmarkSentence { sentence_id: format!("id{i}"), text, mentions: ms });
        }
        let back = parse_benchmark("b", &bench.to_jsonl(), BenchmarkFormat::Jsonl).unwrap();
        prop_assert_eq!(back, bench);
    }
}

#[test]
fn qid_title_roundtrip_on_sample_mapping() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/data/mapping.tsv")).unwrap();
    let idx: MappingIndex = tailink::kb::parse_mapping(&text).unwrap();
    for rec in idx.records().iter().filter(|r| !r.is_redirect()) {
        if let Some(q) = &rec.qid {
            let title = idx.qid_to_title(q.as_str()).unwrap();
            assert_eq!(idx.title_to_qid(title.as_str(), true), Some(q));
        }
    }
}
