use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use limerick::cli::run_cli;
use limerick::langmodel::{LanguageModel, LmError, RemoteEndpointConfig, RemoteModel};

/// Serves one canned reply per connection and forwards each request body.
fn serve(replies: Vec<(u16, String, u64)>) -> (String, mpsc::Receiver<(String, String)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body, delay_ms) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h == "\r\n" || h.is_empty() {
                    break;
                }
                if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send((request_line.trim().to_string(), String::from_utf8(buf).unwrap()));
            thread::sleep(Duration::from_millis(delay_ms));
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, rx)
}

fn model(url: &str, timeout_ms: u64) -> RemoteModel {
    let mut cfg = RemoteEndpointConfig::new(url);
    cfg.timeout_ms = timeout_ms;
    cfg.top_k = 7;
    RemoteModel::new(cfg).unwrap()
}

#[test]
fn distribution_is_renormalized_and_marked_truncated() {
    let body = r#"{"tokens":[{"token":"cat","logprob":-1.0},{"token":"hat","logprob":-1.0}]}"#;
    let (url, rx) = serve(vec![(200, body.into(), 0)]);
    let d = model(&url, 5000).next_distribution(&["<s>", "the"]).unwrap();
    assert!(d.truncated);
    assert!((d.prob("cat") - 0.5).abs() < 1e-12);
    assert!((d.prob("hat") - 0.5).abs() < 1e-12);
    assert_eq!(d.prob("dog"), 0.0);
    let (line, req) = rx.recv().unwrap();
    assert_eq!(line, "POST /v1/distribution HTTP/1.1");
    let req: serde_json::Value = serde_json::from_str(&req).unwrap();
    assert_eq!(req, serde_json::json!({"context": ["<s>", "the"], "top_k": 7}));
}

#[test]
fn singleton_response_has_probability_one() {
    let (url, _rx) = serve(vec![(200, r#"{"tokens":[{"token":"cat","logprob":-1.0}]}"#.into(), 0)]);
    let d = model(&url, 5000).next_distribution(&[]).unwrap();
    assert_eq!(d.prob("cat"), 1.0);
}

#[test]
fn bad_responses_are_backend_errors() {
    let cases = vec![
        (200, r#"{"tokens":[]}"#.to_string(), 0),
        (500, r#"{"error":"boom"}"#.to_string(), 0),
        (200, "not json".to_string(), 0),
        (200, r#"{"tokens":[{"token":"a","logprob":0.5}]}"#.to_string(), 0),
        (200, r#"{"tokens":[{"token":"a","logprob":-1},{"token":"a","logprob":-2}]}"#.to_string(), 0),
    ];
    let n = cases.len();
    let (url, _rx) = serve(cases);
    let m = model(&url, 5000);
    for i in 0..n {
        assert!(matches!(m.next_distribution(&["x"]), Err(LmError::Backend(_))), "case {i}");
    }
}

#[test]
fn slow_server_times_out() {
    let (url, _rx) = serve(vec![(200, r#"{"tokens":[{"token":"a","logprob":-1}]}"#.into(), 1500)]);
    let err = model(&url, 200).next_distribution(&["x"]).unwrap_err();
    assert!(matches!(err, LmError::Backend(_)));
}

#[test]
fn serve_check_reports_the_endpoint() {
    let body = r#"{"tokens":[{"token":"there","logprob":-0.1},{"token":"a","logprob":-3.0}]}"#;
    let (url, _rx) = serve(vec![(200, body.into(), 0)]);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let spec = format!("remote:{url}");
    assert_eq!(run_cli(["limerick", "serve-check", "--lm", &spec], &mut out, &mut err), 0);
    let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(v["support"], 2);
    assert_eq!(v["truncated"], true);
    assert_eq!(v["top"][0]["token"], "there");

    // nothing listens on a freshly released port
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let spec = format!("remote:http://127.0.0.1:{port}");
    let (mut out, mut err) = (Vec::new(), Vec::new());
    assert_eq!(run_cli(["limerick", "serve-check", "--lm", &spec], &mut out, &mut err), 1);
    assert!(!err.is_empty());
}
