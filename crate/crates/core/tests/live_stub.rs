mod common;

use std::fs;

use common::{dead_endpoint, StubServer};
use serde_json::json;
use tailink::kb::live::{LiveConfig, LiveError, LiveQuery, LiveResolver};
use tailink::kb::Qid;
use tailink::popularity::{fetch_counts, load_counts, CountsFetchConfig, PopularityError};

fn wiki_handler(req: &common::Request) -> (u16, String) {
    if req.param("action") == Some("wbgetentities") {
        let ids = req.param("ids").unwrap_or_default();
        if req.param("props") == Some("sitelinks") {
            let body = match ids {
                "Q1145" => {
                    json!({"entities": {"Q1145": {"id": "Q1145", "sitelinks": {"enwiki": {"site": "enwiki", "title": "Jean-Philippe Rameau"}}}}})
                }
                other => json!({"entities": {other: {"id": other, "missing": ""}}}),
            };
            return (200, body.to_string());
        }
        let mut entities = serde_json::Map::new();
        for id in ids.split('|') {
            let entity = match id {
                "Q1" => json!({"id": "Q1", "claims": {"P31": [{}, {}], "P17": [{}]}}),
                "Q2" => json!({"id": "Q2", "claims": {"P31": [{}]}}),
                "Q3" => json!({"id": "Q3", "missing": ""}),
                other => json!({"id": other, "claims": {}}),
            };
            entities.insert(id.to_string(), entity);
        }
        return (200, json!({"entities": entities}).to_string());
    }
    let title = req.param("titles").unwrap_or_default();
    let page = match title {
        "Jean-Philippe Rameau" => {
            json!({"pageid": 16345, "ns": 0, "title": "Jean-Philippe Rameau", "pageprops": {"wikibase_item": "Q1145"}})
        }
        "Rossint" => {
            json!({"pageid": 9726, "ns": 0, "title": "Gioachino Rossini", "pageprops": {"wikibase_item": "Q9726"}})
        }
        other => json!({"ns": 0, "title": other, "missing": true}),
    };
    let mut query = json!({"pages": [page]});
    if title == "Rossint" {
        query["redirects"] = json!([{"from": "Rossint", "to": "Gioachino Rossini"}]);
    }
    (200, json!({"batchcomplete": true, "query": query}).to_string())
}

fn live_config(server: &StubServer, cache: &std::path::Path) -> LiveConfig {
    LiveConfig {
        wikipedia_api: format!("{}/w/api.php", server.base),
        wikidata_api: format!("{}/wd/api.php", server.base),
        ..LiveConfig::new(cache)
    }
}

#[test]
fn title_lookup_is_cached() {
    let server = StubServer::start(wiki_handler);
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let resolver = LiveResolver::open(live_config(&server, &cache)).unwrap();
    let query = LiveQuery::Title("jean-Philippe_Rameau".into());
    let rec = resolver.live_lookup(&query).unwrap().unwrap();
    assert_eq!(rec.qid.as_ref().unwrap().as_str(), "Q1145");
    assert_eq!(rec.canonical_title.as_str(), "Jean-Philippe Rameau");
    assert_eq!(server.hits(), 1);
    assert_eq!(server.request(0).param("titles"), Some("Jean-Philippe Rameau"));

    resolver
        .live_lookup(&LiveQuery::Title("Jean-Philippe Rameau".into()))
        .unwrap();
    assert_eq!(server.hits(), 1);
    drop(resolver);

    let cfg = LiveConfig {
        wikipedia_api: dead_endpoint(),
        ..LiveConfig::new(&cache)
    };
    let reopened = LiveResolver::open(cfg).unwrap();
    assert_eq!(reopened.live_lookup(&query).unwrap(), Some(rec));
}

#[test]
fn negative_answers_are_cached() {
    let server = StubServer::start(wiki_handler);
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let resolver = LiveResolver::open(live_config(&server, &cache)).unwrap();
    let q = LiveQuery::Title("zzqqx123".into());
    assert_eq!(resolver.live_lookup(&q).unwrap(), None);
    assert_eq!(resolver.live_lookup(&q).unwrap(), None);
    assert_eq!(server.hits(), 1);
    assert_eq!(resolver.cached_entries(), 1);
}

#[test]
fn redirects_and_qid_queries() {
    let server = StubServer::start(wiki_handler);
    let dir = tempfile::tempdir().unwrap();
    let resolver = LiveResolver::open(live_config(&server, &dir.path().join("c.jsonl"))).unwrap();
    let rossini = resolver
        .live_lookup(&LiveQuery::Title("Rossint".into()))
        .unwrap()
        .unwrap();
    assert_eq!(rossini.qid.unwrap().as_str(), "Q9726");
    assert_eq!(rossini.canonical_title.as_str(), "Gioachino Rossini");

    let by_qid = resolver
        .live_lookup(&LiveQuery::Qid(Qid::parse("Q1145").unwrap()))
        .unwrap()
        .unwrap();
    assert_eq!(by_qid.canonical_title.as_str(), "Jean-Philippe Rameau");
    let missing = resolver
        .live_lookup(&LiveQuery::Qid(Qid::parse("Q999999999").unwrap()))
        .unwrap();
    assert_eq!(missing, None);
}

#[test]
fn network_failure_is_not_a_miss() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("c.jsonl");
    let cfg = LiveConfig {
        wikipedia_api: dead_endpoint(),
        ..LiveConfig::new(&cache)
    };
    let resolver = LiveResolver::open(cfg).unwrap();
    let err = resolver.live_lookup(&LiveQuery::Title("Anything".into())).unwrap_err();
    assert!(matches!(err, LiveError::Network(_)));
    assert_eq!(resolver.cached_entries(), 0);
}

#[test]
fn malformed_api_response() {
    let server = StubServer::start(|_| (200, "{\"query\":{}}".into()));
    let dir = tempfile::tempdir().unwrap();
    let resolver = LiveResolver::open(live_config(&server, &dir.path().join("c.jsonl"))).unwrap();
    let err = resolver.live_lookup(&LiveQuery::Title("X".into())).unwrap_err();
    assert!(matches!(err, LiveError::Malformed(_)));
}

#[test]
fn torn_journal_line_is_dropped_on_open() {
    let server = StubServer::start(wiki_handler);
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("c.jsonl");
    fs::write(&cache, "{\"key\":\"title:Zzqqx123\",\"record\":null}\n{\"key\":\"tit").unwrap();
    let resolver = LiveResolver::open(live_config(&server, &cache)).unwrap();
    assert_eq!(resolver.cached_entries(), 1);
    assert_eq!(
        resolver.live_lookup(&LiveQuery::Title("zzqqx123".into())).unwrap(),
        None
    );
    assert_eq!(server.hits(), 0);
}

#[test]
fn fetch_counts_writes_cache_then_reruns_offline() {
    let server = StubServer::start(wiki_handler);
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.tsv");
    let cfg = CountsFetchConfig {
        wikidata_api: format!("{}/w/api.php", server.base),
        ..CountsFetchConfig::new(&counts)
    };
    let qids: Vec<Qid> = ["Q1", "Q2", "Q3"].iter().map(|q| Qid::parse(q).unwrap()).collect();
    let idx = fetch_counts(&cfg, &qids).unwrap();
    assert_eq!(idx.get("Q1"), Some(3));
    assert_eq!(idx.get("Q2"), Some(1));
    assert_eq!(idx.get("Q3"), Some(0));
    assert_eq!(server.hits(), 1);
    let text = fs::read_to_string(&counts).unwrap();
    assert_eq!(text.lines().count(), 3);

    let offline = CountsFetchConfig {
        wikidata_api: dead_endpoint(),
        ..CountsFetchConfig::new(&counts)
    };
    let again = fetch_counts(&offline, &qids).unwrap();
    assert_eq!(again.counts, idx.counts);
    assert_eq!(server.hits(), 1);
    assert_eq!(load_counts(&counts).unwrap().counts, idx.counts);
}

#[test]
fn fetch_counts_network_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CountsFetchConfig {
        wikidata_api: dead_endpoint(),
        ..CountsFetchConfig::new(dir.path().join("c.tsv"))
    };
    let err = fetch_counts(&cfg, &[Qid::parse("Q1").unwrap()]).unwrap_err();
    assert!(matches!(err, PopularityError::Network(_)));
}
