use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use maskprior::pipeline::run_scene;
use maskprior::prior::{Classification, Verdict};
use maskprior::synth::{generate, EntityKind, SynthSpec};
use maskprior::vlm::{build_prompt, parse_verdict, prompt_text, query_vlm, AuditLog, HttpVlm, Prompt, VlmBackend, AUDIT_FILE, VLM_DISABLED};
use maskprior::{Error, PipelineConfig, VlmConfig, VlmMode};

/// Scripted reply of the local test server.
#[derive(Clone)]
struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

fn chat(content: &str) -> Reply {
    Reply {
        status: 200,
        body: serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(),
        delay: Duration::ZERO,
    }
}

fn status(code: u16) -> Reply {
    Reply {
        status: code,
        body: "{\"error\": \"overloaded\"}".into(),
        delay: Duration::ZERO,
    }
}

struct Recorded {
    headers: Vec<String>,
    body: String,
}

struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<Recorded>>>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Serves one scripted reply per incoming connection, then stops.
    fn start(script: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for reply in script {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = Vec::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let line = line.trim_end().to_string();
                    if line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push(line);
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Recorded {
                    headers,
                    body: String::from_utf8(body).unwrap(),
                });
                std::thread::sleep(reply.delay);
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    reply.status,
                    reply.body.len(),
                    reply.body
                );
            }
        });
        MockServer {
            url,
            requests,
            handle: Some(handle),
        }
    }

    fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        // unblock a server still waiting for a connection that never comes
        if let Some(h) = self.handle.take() {
            if !h.is_finished() {
                let _ = std::net::TcpStream::connect(self.url.trim_start_matches("http://").split('/').next().unwrap());
            }
            let _ = h.join();
        }
    }
}

fn config(url: &str) -> VlmConfig {
    VlmConfig {
        mode: VlmMode::Endpoint,
        url: Some(url.to_string()),
        timeout_secs: 5.0,
        backoff_ms: 1,
        ..Default::default()
    }
}

fn prompt() -> Prompt {
    Prompt {
        text: prompt_text(&[1, 2]),
        image_png: vec![0x89, b'P', b'N', b'G', 1, 2, 3],
    }
}

fn audit_lines(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join(AUDIT_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn canned_reply_is_returned_and_request_is_well_formed() {
    let server = MockServer::start(vec![chat("1: static - sky\n2: transient - person")]);
    let tmp = tempfile::tempdir().unwrap();
    let vlm = HttpVlm::new(config(&server.url), Some("sk-test-secret".into()), Some(AuditLog::create(tmp.path()).unwrap())).unwrap();
    let reply = query_vlm(&vlm, 3, &prompt()).unwrap();
    let v = parse_verdict(&reply, &[1, 2]).unwrap();
    assert_eq!(v.labels[&1].verdict, Verdict::Static);
    assert_eq!(v.labels[&2].verdict, Verdict::Transient);

    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    assert!(reqs[0].headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test-secret")));
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body["model"], "gpt-4o");
    let parts = body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(parts[0]["text"], prompt().text);
    assert!(parts[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[test]
fn audit_log_redacts_the_credential() {
    let server = MockServer::start(vec![chat("1: static")]);
    let tmp = tempfile::tempdir().unwrap();
    let vlm = HttpVlm::new(config(&server.url), Some("sk-test-secret".into()), Some(AuditLog::create(tmp.path()).unwrap())).unwrap();
    query_vlm(&vlm, 0, &prompt()).unwrap();
    let raw = std::fs::read_to_string(tmp.path().join(AUDIT_FILE)).unwrap();
    assert!(!raw.contains("sk-test-secret"));
    let lines = audit_lines(tmp.path());
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["authorization"], "Bearer [REDACTED]");
    assert_eq!(lines[0]["status"], 200);
    assert_eq!(lines[0]["image_png_bytes"], 7);
    assert_eq!(lines[0]["image_png_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(lines[0]["response"], "1: static");
}

#[test]
fn persistent_server_errors_fail_after_three_attempts() {
    let server = MockServer::start(vec![status(500), status(500), status(500)]);
    let tmp = tempfile::tempdir().unwrap();
    let vlm = HttpVlm::new(config(&server.url), None, Some(AuditLog::create(tmp.path()).unwrap())).unwrap();
    let err = query_vlm(&vlm, 0, &prompt()).unwrap_err();
    assert!(matches!(err, Error::Vlm { status: Some(500), .. }), "{err:?}");
    assert_eq!(server.request_count(), 3);
    let lines = audit_lines(tmp.path());
    assert_eq!(lines.iter().map(|l| l["attempt"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(lines.iter().all(|l| l["authorization"].is_null()));
}

#[test]
fn transient_failure_is_retried() {
    let server = MockServer::start(vec![status(503), chat("1: transient - dog")]);
    let vlm = HttpVlm::new(config(&server.url), None, None).unwrap();
    assert_eq!(query_vlm(&vlm, 0, &prompt()).unwrap(), "1: transient - dog");
    assert_eq!(server.request_count(), 2);
}

#[test]
fn slow_endpoint_times_out() {
    let mut slow = chat("1: static");
    slow.delay = Duration::from_millis(1500);
    let server = MockServer::start(vec![slow]);
    let cfg = VlmConfig {
        timeout_secs: 0.2,
        max_attempts: 1,
        ..config(&server.url)
    };
    let vlm = HttpVlm::new(cfg, None, None).unwrap();
    let err = query_vlm(&vlm, 0, &prompt()).unwrap_err();
    assert!(matches!(err, Error::VlmTimeout(_)), "{err:?}");
}

#[test]
fn malformed_reply_body_is_a_vlm_error() {
    let server = MockServer::start(vec![Reply {
        status: 200,
        body: "{\"choices\": []}".into(),
        delay: Duration::ZERO,
    }]);
    let cfg = VlmConfig {
        max_attempts: 1,
        ..config(&server.url)
    };
    let vlm = HttpVlm::new(cfg, None, None).unwrap();
    assert!(matches!(query_vlm(&vlm, 0, &prompt()), Err(Error::Vlm { status: Some(200), .. })));
}

#[test]
fn disabled_mode_makes_no_request() {
    let cfg = VlmConfig {
        mode: VlmMode::Off,
        url: Some("http://127.0.0.1:9/".into()),
        ..Default::default()
    };
    let vlm = HttpVlm::new(cfg, None, None).unwrap();
    assert_eq!(query_vlm(&vlm, 0, &prompt()).unwrap(), VLM_DISABLED);
}

#[test]
fn prompt_matches_golden_file() {
    let golden = include_str!("data/prompt_labels_1_2_3.txt");
    assert_eq!(prompt_text(&[1, 2, 3]), golden);
}

#[test]
fn reply_corpus() {
    let corpus: serde_json::Value = serde_json::from_str(include_str!("data/vlm_replies/corpus.json")).unwrap();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/vlm_replies");
    for case in corpus.as_array().unwrap() {
        let file = case["file"].as_str().unwrap();
        let reply = std::fs::read_to_string(dir.join(file)).unwrap();
        let labels: Vec<u32> = serde_json::from_value(case["labels"].clone()).unwrap();
        let got = parse_verdict(&reply, &labels);
        match case.get("expect") {
            None => assert!(matches!(got, Err(Error::VerdictParse)), "{file}: {got:?}"),
            Some(expect) => {
                let got = got.unwrap_or_else(|e| panic!("{file}: {e}"));
                for (label, want) in expect.as_object().unwrap() {
                    let lv = &got.labels[&label.parse::<u32>().unwrap()];
                    let (verdict, parsed) = match want.as_str().unwrap() {
                        "static" => (Verdict::Static, true),
                        "transient" => (Verdict::Transient, true),
                        "default" => (Verdict::Transient, false),
                        other => panic!("bad expectation {other}"),
                    };
                    assert_eq!((lv.verdict, lv.parsed), (verdict, parsed), "{file} label {label}");
                }
            }
        }
    }
}

/// Answers every identifier in the prompt with the same verdict.
struct Uniform(&'static str);

impl VlmBackend for Uniform {
    fn query(&self, _view: usize, prompt: &Prompt) -> maskprior::Result<String> {
        let ids = prompt
            .text
            .lines()
            .find_map(|l| l.strip_prefix("Identifiers to classify: "))
            .unwrap();
        Ok(ids.split(", ").map(|id| format!("{id}: {} - test\n", self.0)).collect())
    }
}

#[test]
fn vlm_promotes_textureless_structure() {
    let scene = generate(&SynthSpec {
        seed: 21,
        num_static: 3,
        num_textureless: 1,
        num_transient: 1,
        ..Default::default()
    })
    .unwrap();
    let wall = scene
        .truth
        .entities
        .iter()
        .find(|e| e.kind == EntityKind::Textureless)
        .unwrap()
        .entity_id;
    let mut cfg = PipelineConfig {
        min_region_pixels: 50,
        ..Default::default()
    };
    let off = run_scene(&scene.scene, &scene.attention, &cfg, None).unwrap();
    let wall_views: Vec<usize> = off
        .matching
        .decisions
        .iter()
        .filter(|((_, id), _)| *id == wall)
        .map(|((v, _), d)| {
            assert_eq!(d.classification, Classification::TransientCandidate);
            *v
        })
        .collect();
    assert!(!wall_views.is_empty());

    cfg.vlm = config("http://unused.invalid/");
    let promoted = run_scene(&scene.scene, &scene.attention, &cfg, Some(&Uniform("static"))).unwrap();
    for &v in &wall_views {
        let d = &promoted.priors[v].per_entity[&wall];
        assert_eq!(d.classification, Classification::VlmStatic);
        assert_eq!(d.matching, Classification::TransientCandidate);
        assert!(promoted.priors[v].static_map.count() > off.priors[v].static_map.count());
    }

    let kept = run_scene(&scene.scene, &scene.attention, &cfg, Some(&Uniform("transient"))).unwrap();
    for (a, b) in kept.priors.iter().zip(&off.priors) {
        assert_eq!(a.static_map, b.static_map);
    }
}

#[test]
fn candidates_below_the_floor_are_not_queried() {
    struct Panics;
    impl VlmBackend for Panics {
        fn query(&self, _: usize, _: &Prompt) -> maskprior::Result<String> {
            panic!("no candidate reaches the floor");
        }
    }
    let scene = generate(&SynthSpec {
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.vlm = config("http://unused.invalid/");
    // 160x120 images cannot hold a 20000 px region
    let r = run_scene(&scene.scene, &scene.attention, &cfg, Some(&Panics)).unwrap();
    assert!(r.verdicts.is_empty());
    let q = build_prompt(&maskprior::vlm::annotate(0, &scene.scene.views[0].image, &[], 0, 0.4).unwrap());
    assert!(q.text.contains("Identifiers to classify: \n"));
}
