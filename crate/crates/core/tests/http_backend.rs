//! Wire-format tests for the remote backend against a canned in-process HTTP
//! server.

use proxy_align::backends::{BackendError, NextTokenSource, RemoteLm, TopKRequest};
use proxy_align::dist::TokenDistribution;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Duration;

/// Serves one canned HTTP response and hands back the request it saw.
fn one_shot_server(status: &'static str, body: String) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().expect("accept");
        stream
            .set_read_timeout(Some(Duration::from_secs(5)))
            .unwrap();
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        // read until the headers and the announced content-length are in
        loop {
            let n = stream.read(&mut chunk).unwrap_or(0);
            if n == 0 {
                break;
            }
            buf.extend_from_slice(&chunk[..n]);
            let text = String::from_utf8_lossy(&buf);
            if let Some(header_end) = text.find("\r\n\r\n") {
                let content_length = text
                    .lines()
                    .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(str::trim).map(String::from))
                    .and_then(|v| v.parse::<usize>().ok())
                    .unwrap_or(0);
                if buf.len() >= header_end + 4 + content_length {
                    break;
                }
            }
        }
        tx.send(String::from_utf8_lossy(&buf).to_string()).ok();
        let response = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(response.as_bytes()).ok();
    });
    (format!("http://{addr}"), rx)
}

fn remote(endpoint: String, vocab: usize, top_k: TopKRequest) -> RemoteLm {
    RemoteLm::new(
        endpoint,
        "test-model".into(),
        vocab,
        top_k,
        Duration::from_secs(5),
    )
    .unwrap()
}

#[test]
fn full_vocab_response_passes_through() {
    let body = r#"{"choices":[{"logprobs":{"top_logprobs":[{"0":-0.1,"1":-1.2,"2":-2.3}]}}]}"#;
    let (endpoint, rx) = one_shot_server("200 OK", body.to_string());
    let lm = remote(endpoint, 3, TopKRequest::All);
    let logits = lm.next_logits(&[5, 6, 7]).unwrap();
    assert_eq!(logits.logits(), &[-0.1, -1.2, -2.3]);
    assert!(lm.capabilities().full_vocab);

    let request = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    let first_line = request.lines().next().unwrap();
    assert_eq!(first_line, "POST /v1/completions HTTP/1.1");
    let json_start = request.find("\r\n\r\n").unwrap() + 4;
    let body: serde_json::Value = serde_json::from_str(&request[json_start..]).unwrap();
    assert_eq!(
        body,
        serde_json::json!({
            "model": "test-model",
            "prompt": [5, 6, 7],
            "max_tokens": 1,
            "logprobs": "all",
            "temperature": 1.0,
        })
    );
}

#[test]
fn top_k_response_floors_and_downgrades() {
    // top-5 of a 50-token vocab
    let body = r#"{"choices":[{"logprobs":{"top_logprobs":[{"3":-0.2,"7":-2.0,"9":-0.9,"17":-1.0,"42":-3.5}]}}]}"#;
    let (endpoint, rx) = one_shot_server("200 OK", body.to_string());
    let lm = remote(endpoint, 50, TopKRequest::K(5));
    let logits = lm.next_logits(&[1]).unwrap();
    let floor = -3.5 - 20.0;
    assert_eq!(
        logits.logits().iter().filter(|&&l| l == floor).count(),
        45
    );
    assert_eq!(logits.logits()[3], -0.2);
    assert_eq!(logits.logits()[42], -3.5);
    let caps = lm.capabilities();
    assert!(!caps.full_vocab);
    assert_eq!(caps.top_k_limit, Some(5));
    // the floored vector still forms a distribution
    TokenDistribution::from_logits(&logits, 0.7).unwrap();

    let request = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert!(request.contains(r#""logprobs":5"#));
}

#[test]
fn server_asked_for_all_but_replying_top_k_downgrades() {
    let body = r#"{"choices":[{"logprobs":{"top_logprobs":[{"0":-0.5,"2":-1.5}]}}]}"#;
    let (endpoint, _rx) = one_shot_server("200 OK", body.to_string());
    let lm = remote(endpoint, 4, TopKRequest::All);
    assert!(lm.capabilities().full_vocab);
    lm.next_logits(&[0]).unwrap();
    let caps = lm.capabilities();
    assert!(!caps.full_vocab);
    assert_eq!(caps.top_k_limit, Some(2));
}

#[test]
fn http_error_status_is_surfaced() {
    let (endpoint, _rx) = one_shot_server("404 Not Found", "{}".to_string());
    let lm = remote(endpoint, 3, TopKRequest::All);
    match lm.next_logits(&[1, 2]) {
        Err(BackendError::HttpError(404)) => {}
        other => panic!("expected HttpError(404), got {other:?}"),
    }
}

#[test]
fn missing_logprobs_is_a_protocol_error() {
    let body = r#"{"choices":[{"text":"hi"}]}"#;
    let (endpoint, _rx) = one_shot_server("200 OK", body.to_string());
    let lm = remote(endpoint, 3, TopKRequest::All);
    match lm.next_logits(&[1]) {
        Err(BackendError::ProtocolError(_)) => {}
        other => panic!("expected ProtocolError, got {other:?}"),
    }
}

#[test]
fn out_of_vocab_token_id_is_a_vocab_mismatch() {
    let body = r#"{"choices":[{"logprobs":{"top_logprobs":[{"99":-0.5}]}}]}"#;
    let (endpoint, _rx) = one_shot_server("200 OK", body.to_string());
    let lm = remote(endpoint, 3, TopKRequest::All);
    match lm.next_logits(&[1]) {
        Err(BackendError::VocabMismatch(_)) => {}
        other => panic!("expected VocabMismatch, got {other:?}"),
    }
}

#[test]
fn timeout_is_reported_as_timeout() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    // accept but never answer
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        std::thread::sleep(Duration::from_millis(600));
        drop(stream);
    });
    let lm = RemoteLm::new(
        format!("http://{addr}"),
        "m".into(),
        3,
        TopKRequest::All,
        Duration::from_millis(150),
    )
    .unwrap();
    match lm.next_logits(&[1]) {
        Err(BackendError::Timeout) => {}
        other => panic!("expected Timeout, got {other:?}"),
    }
    handle.join().unwrap();
}
