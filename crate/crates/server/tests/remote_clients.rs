mod common;

use std::time::{Duration, Instant};

use rcg_core::embed::{embed_texts, EmbedderKind, EmbedderSpec};
use rcg_core::llm::{generate, generate_stream, GenerationEvent, LlmKind, LlmSpec};
use rcg_server::mock::MockOptions;

use common::{mock, runtime};

fn remote_spec(url: String, stream: bool) -> LlmSpec {
    LlmSpec {
        kind: LlmKind::Remote,
        endpoint_url: url,
        model_name: "mock".into(),
        stream,
        request_timeout_ms: 5_000,
        ..LlmSpec::default()
    }
}

#[test]
fn streamed_and_plain_completions_agree() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            chunks: Some(vec!["Hel".into(), "lo".into()]),
            ..Default::default()
        },
    );
    let streaming = remote_spec(m.completions_url(), true).build().unwrap();
    let mut chunks = Vec::new();
    let mut dones = 0;
    let c = generate_stream(streaming.as_ref(), "say hello", &mut |ev| match ev {
        GenerationEvent::TokenChunk { text } => chunks.push(text),
        GenerationEvent::Done { .. } => dones += 1,
        GenerationEvent::Error { .. } => panic!("unexpected error event"),
    })
    .unwrap();
    assert_eq!(chunks, vec!["Hel", "lo"]);
    assert_eq!(dones, 1);
    assert_eq!(c.text, "Hello");
    assert_eq!(c.finish_reason, "stop");

    let plain = remote_spec(m.completions_url(), false).build().unwrap();
    assert_eq!(generate(plain.as_ref(), "say hello").unwrap().text, "Hello");
}

#[test]
fn stalled_stream_hits_deadline_without_retry() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            stall: true,
            ..Default::default()
        },
    );
    let spec = LlmSpec {
        request_timeout_ms: 500,
        retries: 3,
        ..remote_spec(m.completions_url(), true)
    };
    let model = spec.build().unwrap();
    let t = Instant::now();
    let mut events = Vec::new();
    let err = generate_stream(model.as_ref(), "hello", &mut |ev| events.push(ev)).unwrap_err();
    let elapsed = t.elapsed();
    assert_eq!(err.code(), "llm.timeout");
    assert!(elapsed < Duration::from_millis(1_500), "took {elapsed:?}");
    assert!(elapsed >= Duration::from_millis(450), "took {elapsed:?}");
    assert_eq!(m.state.completion_requests.load(std::sync::atomic::Ordering::SeqCst), 1);
    assert!(matches!(events.last(), Some(GenerationEvent::Error { code, .. }) if code == "llm.timeout"));
}

#[test]
fn server_errors_are_retried_then_reported() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            fail_status: Some(503),
            ..Default::default()
        },
    );
    let spec = LlmSpec {
        retries: 2,
        ..remote_spec(m.completions_url(), true)
    };
    let err = generate(spec.build().unwrap().as_ref(), "hello").unwrap_err();
    assert_eq!(err.code(), "llm.upstream");
    assert_eq!(m.state.completion_requests.load(std::sync::atomic::Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            fail_status: Some(400),
            ..Default::default()
        },
    );
    let spec = LlmSpec {
        retries: 2,
        ..remote_spec(m.completions_url(), true)
    };
    assert!(generate(spec.build().unwrap().as_ref(), "hello").is_err());
    assert_eq!(m.state.completion_requests.load(std::sync::atomic::Ordering::SeqCst), 1);
}

#[test]
fn unreachable_endpoint_is_reported() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let spec = LlmSpec {
        retries: 1,
        request_timeout_ms: 2_000,
        ..remote_spec(format!("http://{addr}/v1/completions"), true)
    };
    let err = generate(spec.build().unwrap().as_ref(), "hello").unwrap_err();
    assert_eq!(err.code(), "llm.unreachable");
}

#[test]
fn remote_embeddings_follow_input_order_and_are_normalized() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            fixed_vectors: Some(vec![vec![3.0, 4.0, 0.0, 0.0], vec![0.0, 0.0, 2.0, 0.0]]),
            ..Default::default()
        },
    );
    let spec = EmbedderSpec {
        kind: EmbedderKind::Remote,
        endpoint_url: m.embeddings_url(),
        model_name: "mock-embed".into(),
        dim: 4,
        batch_size: 2,
        ..EmbedderSpec::default()
    };
    let e = spec.build().unwrap();
    let texts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let rows = embed_texts(e.as_ref(), &texts).unwrap();
    let want = [[0.6, 0.8, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.6, 0.8, 0.0, 0.0]];
    assert_eq!(rows.len(), 3);
    for (row, w) in rows.iter().zip(want) {
        for (a, b) in row.iter().zip(w) {
            assert!((a - b).abs() < 1e-6, "{row:?} vs {w:?}");
        }
    }
    assert_eq!(m.state.embedding_requests.load(std::sync::atomic::Ordering::SeqCst), 2);
}

#[test]
fn remote_embedding_dimension_mismatch_is_an_error() {
    let rt = runtime();
    let m = mock(
        &rt,
        MockOptions {
            embed_dim: 8,
            ..Default::default()
        },
    );
    let spec = EmbedderSpec {
        kind: EmbedderKind::Remote,
        endpoint_url: m.embeddings_url(),
        model_name: "mock-embed".into(),
        dim: 4,
        retries: 0,
        ..EmbedderSpec::default()
    };
    let e = spec.build().unwrap();
    assert!(embed_texts(e.as_ref(), &["x".to_string()]).is_err());
}
