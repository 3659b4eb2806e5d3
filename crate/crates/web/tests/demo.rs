use fidqa_web::{recall_curve_json, score_answer_json, ExplorerState};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn explorer_finds_the_entity_passage() {
    let ex = ExplorerState::synthetic(200, 3).unwrap();
    assert_eq!(ex.len(), 200);
    let first = parse(&ex.search("anything", "flat", 200, 64).unwrap());
    let title = first[0]["title"].as_str().unwrap().to_string();
    let query = format!("what kind of thing is the {title} ? a photo of a {title}");
    for backend in ["flat", "hnsw", "bm25"] {
        let hits = parse(&ex.search(&query, backend, 5, 128).unwrap());
        let hits = hits.as_array().unwrap();
        assert_eq!(hits.len(), 5, "{backend}");
        assert!(
            hits.iter().any(|h| h["title"] == title.as_str()),
            "{backend}"
        );
        let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
        assert!(
            scores.windows(2).all(|w| w[0] >= w[1]),
            "{backend}: {scores:?}"
        );
    }
}

#[test]
fn flat_and_hnsw_agree_on_a_small_corpus() {
    let ex = ExplorerState::synthetic(100, 0).unwrap();
    for q in ["lamp", "where does it live", "misty river"] {
        let a = parse(&ex.search(q, "flat", 10, 128).unwrap());
        let b = parse(&ex.search(q, "hnsw", 10, 128).unwrap());
        let ids = |v: &Value| {
            v.as_array()
                .unwrap()
                .iter()
                .map(|h| h["id"].clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b), "{q}");
    }
}

#[test]
fn explorer_rejects_bad_input() {
    let ex = ExplorerState::synthetic(10, 0).unwrap();
    assert!(ex.search("q", "annoy", 3, 10).is_err());
    assert!(ex.search("q", "flat", 0, 10).is_err());
    let err =
        ExplorerState::from_jsonl("{\"id\": \"a\", \"title\": \"t\", \"text\": \"b\"}\nnot json")
            .err()
            .unwrap();
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn explorer_from_jsonl() {
    let text = r#"{"id": "z", "title": "Zebra", "text": "black and white stripes"}

{"id": "g", "title": "Giraffe", "text": "a very long neck"}"#;
    let ex = ExplorerState::from_jsonl(text).unwrap();
    assert_eq!(ex.len(), 2);
    let hits = parse(&ex.search("long neck", "bm25", 1, 1).unwrap());
    assert_eq!(hits[0]["id"], "g");
}

#[test]
fn scorer_reports_both_vqa_variants() {
    let answers = "wetsuit\nwetsuit\nlife jacket\nsurfboard\nswimsuit\ndive suit\nwet suit\nscuba suit\nrash guard\nboard shorts";
    let r = parse(&score_answer_json("The Wetsuit!", answers));
    assert_eq!(r["normalized"], "wetsuit");
    assert_eq!(r["matches"], 2);
    assert_eq!(r["annotations"], 10);
    assert_eq!(r["exact_match"], 1.0);
    assert!((r["vqa"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((r["vqa_averaged"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    let miss = parse(&score_answer_json("kayak", answers));
    assert_eq!(miss["exact_match"], 0.0);
    assert_eq!(miss["vqa"], 0.0);
}

#[test]
fn recall_curve_rises_to_one() {
    let efs = [1, 16, 64, 256];
    let points = parse(&recall_curve_json(500, 16, 8, 30, 10, &efs, 1).unwrap());
    let recalls: Vec<f64> = points
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["recall"].as_f64().unwrap())
        .collect();
    assert_eq!(recalls.len(), efs.len());
    assert_eq!(points[0]["ef_search"], 10);
    assert!(
        recalls.windows(2).all(|w| w[0] <= w[1] + 1e-12),
        "{recalls:?}"
    );
    assert!(recalls[3] >= 0.95, "{recalls:?}");
    assert!(recall_curve_json(0, 16, 8, 30, 10, &efs, 1).is_err());
}
