mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::json;

use rcg_server::mock::MockOptions;

use common::*;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn health_and_capabilities() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg, false);
    let (code, body) = get(&format!("{}/health", s.base));
    assert_eq!(code, 200);
    assert_eq!(json(&body)["status"], "ok");
    let caps = json(&get(&format!("{}/capabilities", s.base)).1);
    assert_eq!(caps["read_only"], false);
    assert_eq!(caps["knowledge_bases"][0]["kb_id"], "corpus");
    let approaches: Vec<&str> = caps["approaches"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for name in ["rcg", "rag", "rog"] {
        assert!(approaches.contains(&name));
    }
}

#[test]
fn chat_without_retrieval_returns_stub_echo() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg, false);
    let (code, body) = send("POST", &format!("{}/chat", s.base), r#"{"query":"Q","mode":"off","stream":false}"#);
    assert_eq!(code, 200, "{body}");
    let v = json(&body);
    assert_eq!(v["response"], "NO-KNOWLEDGE: Q");
    assert_eq!(v["retrieval"]["hits"].as_array().unwrap().len(), 0);

    let (_, page) = get(&format!("{}/analysis/log?offset=0&limit=10", s.base));
    let page = json(&page);
    assert_eq!(page["total"], 1);
    assert_eq!(page["records"][0]["response"], "NO-KNOWLEDGE: Q");
    assert_eq!(page["records"][0]["mode"], "off");
}

#[test]
fn streamed_chat_emits_retrieval_tokens_and_done() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg, false);
    let (code, body) = send(
        "POST",
        &format!("{}/chat", s.base),
        r#"{"query":"When did Fab7 start operating?","approach":"rcg"}"#,
    );
    assert_eq!(code, 200);
    let events = sse_events(&body);
    let names: Vec<&str> = events.iter().map(|(e, _)| e.as_str()).collect();
    assert_eq!(names.first(), Some(&"retrieval"));
    assert_eq!(names.last(), Some(&"done"));
    assert!(names[1..names.len() - 1].iter().all(|n| *n == "token"));
    let retrieval = json(&events[0].1);
    assert_eq!(retrieval["kb_id"], "corpus");
    assert_eq!(retrieval["hits"].as_array().unwrap().len(), 3);
    let text: String = events
        .iter()
        .filter(|(e, _)| e == "token")
        .map(|(_, d)| json(d)["text"].as_str().unwrap().to_string())
        .collect();
    let done = json(&events.last().unwrap().1);
    assert_eq!(done["response"].as_str().unwrap(), text);
    assert!(!text.starts_with("NO-KNOWLEDGE"));
    assert_eq!(done["logged"], true);
}

#[test]
fn malformed_requests_are_rejected() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg, false);
    let url = format!("{}/chat", s.base);
    for body in [
        "not json",
        r#"{"query":""}"#,
        r#"{"query":"x","epw_weight":101}"#,
        r#"{"query":"x","kb_id":"nope"}"#,
        r#"{"query":"x","approach":"nope"}"#,
        r#"{"query":"x","mode":"sideways"}"#,
    ] {
        let (code, resp) = send("POST", &url, body);
        assert_eq!(code, 400, "{body} -> {resp}");
        assert!(json(&resp)["error"]["code"].is_string());
    }
    assert_eq!(get(&format!("{}/prompts/missing", s.base)).0, 404);
    assert_eq!(get(&format!("{}/analysis/eval/999", s.base)).0, 404);
}

#[test]
fn over_budget_prompt_is_rejected_before_generation() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "[llm]\nkind = \"stub\"\ncontext_budget = 16\n", "");
    let s = start(&rt, &cfg, false);
    let (code, body) = send("POST", &format!("{}/chat", s.base), r#"{"query":"tell me everything about the plant","stream":false}"#);
    assert_eq!(code, 422);
    assert_eq!(json(&body)["error"]["code"], "llm.budget");
}

#[test]
fn upstream_failure_maps_to_bad_gateway() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            fail_status: Some(500),
            ..Default::default()
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), &remote_llm(&m.completions_url(), 5_000), "");
    let s = start(&rt, &cfg, false);
    let (code, body) = send("POST", &format!("{}/chat", s.base), r#"{"query":"Q","mode":"off","stream":false}"#);
    assert_eq!(code, 502);
    assert_eq!(json(&body)["error"]["code"], "llm.upstream");

    let (code, body) = send("POST", &format!("{}/chat", s.base), r#"{"query":"Q","mode":"off"}"#);
    assert_eq!(code, 200);
    let events = sse_events(&body);
    assert_eq!(events.last().unwrap().0, "error");
    assert_eq!(json(&events.last().unwrap().1)["code"], "llm.upstream");
    let page = json(&get(&format!("{}/analysis/log", s.base)).1);
    assert_eq!(page["total"], 2);
    assert!(page["records"][0]["error"].is_string());
}

#[test]
fn full_queue_answers_429() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            stall: true,
            ..Default::default()
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(
        dir.path(),
        &remote_llm(&m.completions_url(), 1_500),
        "queue_capacity = 1\nmax_concurrent_generations = 1",
    );
    let s = start(&rt, &cfg, false);
    let url = format!("{}/chat", s.base);
    let waiting: Vec<_> = (0..2)
        .map(|i| {
            let url = url.clone();
            thread::spawn(move || send("POST", &url, &format!(r#"{{"query":"q{i}","mode":"off","stream":false}}"#)))
        })
        .collect();
    let t = Instant::now();
    while s.state.admission.in_system() < 2 {
        assert!(t.elapsed() < Duration::from_secs(5), "requests never admitted");
        thread::sleep(Duration::from_millis(10));
    }
    let (code, body) = send("POST", &url, r#"{"query":"q2","mode":"off","stream":false}"#);
    assert_eq!(code, 429, "{body}");
    assert_eq!(json(&body)["error"]["code"], "queue_full");
    for w in waiting {
        let (code, body) = w.join().unwrap();
        assert_eq!(code, 502, "{body}");
        assert_eq!(json(&body)["error"]["code"], "llm.timeout");
    }
    assert_eq!(s.state.admission.in_system(), 0);
    assert_eq!(send("POST", &url, r#"{"query":"q3","mode":"off","stream":false}"#).0, 502);
}

#[test]
fn single_slot_serves_requests_in_arrival_order() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            chunks: Some(vec!["a".into(), "b".into(), "c".into()]),
            chunk_delay: Duration::from_millis(100),
            ..Default::default()
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(
        dir.path(),
        &remote_llm(&m.completions_url(), 10_000),
        "queue_capacity = 4\nmax_concurrent_generations = 1",
    );
    let s = start(&rt, &cfg, false);
    let url = format!("{}/chat", s.base);
    let t0 = Instant::now();
    let first = {
        let url = url.clone();
        thread::spawn(move || {
            let r = send("POST", &url, r#"{"query":"first","mode":"off","stream":false}"#);
            (r, t0.elapsed())
        })
    };
    while s.state.admission.in_system() < 1 {
        thread::sleep(Duration::from_millis(5));
    }
    let second = send("POST", &url, r#"{"query":"second","mode":"off","stream":false}"#);
    let second_at = t0.elapsed();
    let (first, first_at) = first.join().unwrap();
    assert_eq!(first.0, 200);
    assert_eq!(second.0, 200);
    assert!(first_at < second_at);
    // Three chunks at 100 ms each, one generation at a time.
    assert!(second_at >= Duration::from_millis(550), "{second_at:?}");
    assert!(json(&second.1)["latency_ms"]["queue"].as_u64().unwrap() >= 150);
    let page = json(&get(&format!("{}/analysis/log", s.base)).1);
    assert_eq!(page["records"][0]["query"], "first");
    assert_eq!(page["records"][1]["query"], "second");
}

#[test]
fn prompt_sets_round_trip_and_reset() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg, false);
    let set = json!({
        "ai_prefix": "You are terse.\n",
        "retriever_prefix": "<<",
        "retriever_suffix": ">>\n",
        "model_prefix": "",
        "model_suffix": "\nA:"
    });
    let url = format!("{}/prompts/custom", s.base);
    assert_eq!(send("PUT", &url, &set.to_string()).0, 200);
    assert_eq!(json(&get(&url).1), set);
    let on_disk = std::fs::read_to_string(dir.path().join("prompts.json")).unwrap();
    assert_eq!(json(&on_disk)["custom"], set);

    let rcg = format!("{}/prompts/rcg", s.base);
    let original = json(&get(&rcg).1);
    assert_eq!(send("PUT", &rcg, &set.to_string()).0, 200);
    assert_eq!(json(&get(&rcg).1), set);
    assert_eq!(send("POST", &format!("{rcg}/reset"), "").0, 200);
    assert_eq!(json(&get(&rcg).1), original);
    assert_eq!(send("POST", &format!("{url}/reset"), "").0, 404);

    let (code, _) = send("POST", &format!("{}/chat", s.base), r#"{"query":"hi","approach":"custom","mode":"off","stream":false}"#);
    assert_eq!(code, 200);
    assert_eq!(send("PUT", &url, r#"{"bogus":1}"#).0, 400);
}

#[test]
fn read_only_blocks_every_update_and_touches_no_file() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let before = snapshot(dir.path());
    let s = start(&rt, &cfg, true);
    let config_now = get(&format!("{}/config", s.base)).1;
    let cases = [
        ("PUT", "/prompts/rcg", r#"{"model_suffix":"x"}"#.to_string()),
        ("PUT", "/prompts", "{}".to_string()),
        ("POST", "/prompts/rcg/reset", String::new()),
        ("PUT", "/config", config_now),
        ("POST", "/kb/reindex", r#"{"kb_id":"corpus"}"#.to_string()),
        ("POST", "/analysis/eval", r#"{"pairs":[{"query":"a","label":"b"}]}"#.to_string()),
    ];
    for (method, path, body) in &cases {
        let (code, resp) = send(method, &format!("{}{path}", s.base), body);
        assert_eq!(code, 403, "{method} {path}");
        assert_eq!(json(&resp)["error"]["code"], "read_only");
    }
    assert_eq!(json(&get(&format!("{}/capabilities", s.base)).1)["read_only"], true);
    drop(s);
    drop(rt);
    assert_eq!(snapshot(dir.path()), before);
}

#[test]
fn config_update_that_cannot_open_is_rolled_back() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg_path, false);
    let url = format!("{}/config", s.base);
    let original_file = std::fs::read(&cfg_path).unwrap();
    let current = json(&get(&url).1);

    for dim in [0, 32] {
        let mut bad = current.clone();
        bad["embedder"]["dim"] = json!(dim);
        let (code, body) = send("PUT", &url, &bad.to_string());
        assert_eq!(code, 400, "dim {dim}: {body}");
        assert_eq!(json(&get(&url).1), current);
        assert_eq!(std::fs::read(&cfg_path).unwrap(), original_file);
        let (code, _) = send("POST", &format!("{}/chat", s.base), r#"{"query":"Fab7","stream":false}"#);
        assert_eq!(code, 200);
    }

    let mut good = current.clone();
    good["defaults"]["k"] = json!(2);
    let (code, body) = send("PUT", &url, &good.to_string());
    assert_eq!(code, 200, "{body}");
    assert_eq!(json(&get(&url).1)["defaults"]["k"], 2);
    let reread = rcg_core::config::ToolConfig::load(&cfg_path).unwrap();
    assert_eq!(reread.defaults.k, 2);
    let v = json(&send("POST", &format!("{}/chat", s.base), r#"{"query":"Fab7","stream":false}"#).1);
    assert_eq!(v["retrieval"]["hits"].as_array().unwrap().len(), 2);
}

#[test]
fn reindex_rebuilds_from_sources() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg, false);
    let before = json(&get(&format!("{}/kb", s.base)).1)["knowledge_bases"][0]["passages"].as_u64().unwrap();
    std::fs::write(
        dir.path().join("corpus/extra.txt"),
        "The Kitakami plant opened a second fabrication building to expand flash memory output for data centers.",
    )
    .unwrap();
    let (code, body) = send("POST", &format!("{}/kb/reindex", s.base), r#"{"kb_id":"corpus"}"#);
    assert_eq!(code, 200, "{body}");
    let after = json(&get(&format!("{}/kb", s.base)).1)["knowledge_bases"][0]["passages"].as_u64().unwrap();
    assert!(after > before);
    assert_eq!(json(&body)["documents"], 4);
    assert_eq!(send("POST", &format!("{}/kb/reindex", s.base), r#"{"kb_id":"nope"}"#).0, 404);
}

#[test]
fn eval_job_reports_rouge_per_approach() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg, false);
    let dataset = common::fixtures().join("eval_pairs.jsonl");
    let body = json!({
        "dataset": dataset,
        "approaches": "rog,rag,rcg",
        "epw_sweep": "50:50:10",
        "omit_timing": true
    });
    let (code, resp) = send("POST", &format!("{}/analysis/eval", s.base), &body.to_string());
    assert_eq!(code, 202, "{resp}");
    let id = json(&resp)["job_id"].as_u64().unwrap();
    let t = Instant::now();
    let done = loop {
        let v = json(&get(&format!("{}/analysis/eval/{id}", s.base)).1);
        if v["status"] != "running" {
            break v;
        }
        assert!(t.elapsed() < Duration::from_secs(30));
        thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(done["status"], "done");
    let reports = done["reports"].as_array().unwrap();
    let tags: Vec<&str> = reports.iter().map(|r| r["approach"].as_str().unwrap()).collect();
    assert_eq!(tags, ["ROG", "RAG", "RCG", "RCG-EPW-50"]);
    for r in reports {
        assert_eq!(r["rows"].as_array().unwrap().len(), 10);
    }
    let text = done["text"].as_str().unwrap();
    assert!(text.contains("RCG-EPW-50"));

    // Without timing the text is reproducible.
    let id2 = json(&send("POST", &format!("{}/analysis/eval", s.base), &body.to_string()).1)["job_id"]
        .as_u64()
        .unwrap();
    let again = loop {
        let v = json(&get(&format!("{}/analysis/eval/{id2}", s.base)).1);
        if v["status"] != "running" {
            break v;
        }
        thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(again["text"].as_str().unwrap(), text);
}

#[test]
fn log_export_is_ndjson() {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), STUB_LLM, "");
    let s = start(&rt, &cfg, false);
    for q in ["one", "two"] {
        send("POST", &format!("{}/chat", s.base), &format!(r#"{{"query":"{q}","mode":"off","stream":false}}"#));
    }
    let mut r = agent().get(&format!("{}/analysis/log/export", s.base)).call().unwrap();
    assert_eq!(r.headers().get("content-type").unwrap(), "application/x-ndjson");
    let body = r.body_mut().read_to_string().unwrap();
    let lines: Vec<_> = body.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(json(lines[1])["query"], "two");
}
