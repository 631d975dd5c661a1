use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use memescope::backends::{
    BackendError, Capabilities, FineTuneConfig, GenerationBackend, GenerationConfig, GenerationRequest,
    LocalProcessBackend, RemoteBackend, RetryPolicy, TrainingPair, CREDENTIALS_ENV,
};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves one scripted `(status, body)` per connection and records what
/// each request carried.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (name, value) = h.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn caps() -> Capabilities {
    Capabilities {
        supports_few_shot: true,
        supports_training: true,
    }
}

fn no_backoff() -> RetryPolicy {
    RetryPolicy {
        retries: 2,
        backoff_ms: 0,
    }
}

fn ask(backend: &dyn GenerationBackend, image: &str) -> Result<String, BackendError> {
    let cfg = GenerationConfig::default();
    backend.generate(&GenerationRequest {
        sample_id: "s1",
        image_ref: image,
        prompt: "Which label?\nAnswer:",
        config: &cfg,
    })
}

#[test]
fn remote_request_shape_and_credentials() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("m.jpg");
    std::fs::write(&image, b"abc").unwrap();
    let (url, seen) = serve(vec![(200, r#"{"text":"Answer: funny"}"#.into())]);
    std::env::set_var(CREDENTIALS_ENV, "secret-token");
    let backend = RemoteBackend::new("remote", &url, caps()).with_retry(no_backoff());
    let out = ask(&backend, image.to_str().unwrap());
    std::env::remove_var(CREDENTIALS_ENV);
    assert_eq!(out.unwrap(), "Answer: funny");

    let seen = seen.lock().unwrap();
    let req = &seen[0];
    assert_eq!(req.path, "/generate");
    assert_eq!(req.auth.as_deref(), Some("Bearer secret-token"));
    assert_eq!(req.body["sample_id"], "s1");
    assert_eq!(req.body["image_base64"], "YWJj");
    assert_eq!(req.body["temperature"], 0.1);
    assert_eq!(req.body["max_new_tokens"], 512);
    assert_eq!(req.body["prompt"], "Which label?\nAnswer:");
}

#[test]
fn remote_refusal_is_not_retried() {
    let (url, seen) = serve(vec![(451, "policy".into()), (200, r#"{"text":"x"}"#.into())]);
    let backend = RemoteBackend::new("remote", &url, caps()).with_retry(no_backoff()).with_inline_images(false);
    match ask(&backend, "m.jpg") {
        Err(BackendError::ContentRefused { reason, .. }) => assert_eq!(reason, "policy"),
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);

    let (url, _) = serve(vec![(200, r#"{"refused":true,"reason":"nsfw"}"#.into())]);
    let backend = RemoteBackend::new("remote", &url, caps()).with_retry(no_backoff());
    assert!(matches!(ask(&backend, "m.jpg"), Err(BackendError::ContentRefused { .. })));
}

#[test]
fn remote_retries_then_succeeds_or_gives_up() {
    let script = vec![(500, "{}".into()), (503, "{}".into()), (200, r#"{"text":"ok"}"#.into())];
    let (url, seen) = serve(script);
    let backend = RemoteBackend::new("remote", &url, caps()).with_retry(no_backoff());
    assert_eq!(ask(&backend, "m.jpg").unwrap(), "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);

    let (url, _) = serve(vec![(500, "{}".into()); 3]);
    let backend = RemoteBackend::new("remote", &url, caps()).with_retry(no_backoff());
    match ask(&backend, "m.jpg") {
        Err(BackendError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn remote_fine_tune_posts_pairs_and_config() {
    let (url, seen) = serve(vec![(200, "{}".into())]);
    let mut backend = RemoteBackend::new("remote", &url, caps()).with_retry(no_backoff());
    let pairs = vec![TrainingPair {
        text: "a caption".into(),
        label: "funny".into(),
    }];
    backend.fine_tune(&pairs, &FineTuneConfig::default()).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/generate/finetune");
    assert_eq!(seen[0].body["config"]["rank"], 16);
    assert_eq!(seen[0].body["pairs"][0]["label"], "funny");

    let mut frozen = RemoteBackend::new("frozen", &url, Capabilities { supports_few_shot: true, supports_training: false });
    assert!(matches!(frozen.fine_tune(&pairs, &FineTuneConfig::default()), Err(BackendError::BackendLacksTraining(_))));
}

#[test]
fn local_process_round_trip() {
    let script = r#"read -r line; case "$line" in *'"sample_id":"s1"'*) echo '{"text":"Answer: neutral"}';; *) exit 1;; esac"#;
    let backend = LocalProcessBackend::new("local", "sh", vec!["-c".into(), script.into()], caps())
        .with_retry(no_backoff());
    assert_eq!(ask(&backend, "m.jpg").unwrap(), "Answer: neutral");

    let broken = LocalProcessBackend::new("local", "sh", vec!["-c".into(), "exit 3".into()], caps())
        .with_retry(no_backoff());
    assert!(matches!(ask(&broken, "m.jpg"), Err(BackendError::BackendUnavailable { attempts: 3, .. })));
}
