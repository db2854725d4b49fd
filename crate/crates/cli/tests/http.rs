use std::sync::Arc;
use std::time::{Duration, Instant};

use motionloop_cli::config::{Config, CorrectorKind};
use motionloop_cli::server::{router, start_session};
use motionloop_core::annotate::{build_vocabulary, AnnotationConfig, InstructionId, VocabMode, Vocabulary};
use motionloop_core::control::{run_episode, Components};
use motionloop_core::interface::{Session, SessionStatus, StateSnapshot};
use motionloop_core::sim::{instruction_follower, oracle_predictor, OracleContext, TaskSpec};
use serde_json::{json, Value};

const WAIT: Duration = Duration::from_secs(30);

struct Server {
    base: String,
    session: Arc<Session>,
    http: reqwest::Client,
    vocab: Arc<Vocabulary>,
}

async fn server(corruption: f64) -> Server {
    let mut cfg = Config::default();
    cfg.seed = 21;
    cfg.serve.step_gate = true;
    cfg.serve.period_ms = 0;
    cfg.arm.corruption = corruption;
    cfg.arm.corrector = CorrectorKind::None;
    let vocab = Arc::new(build_vocabulary(&cfg.annotation, VocabMode::Combined).unwrap());
    let session = Arc::new(start_session(&cfg, vocab.clone()).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(session.clone(), None);
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { base: format!("http://{addr}"), session, http: reqwest::Client::new(), vocab }
}

impl Server {
    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn post(&self, path: &str, body: &str) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn state(&self) -> StateSnapshot {
        serde_json::from_value(self.get("/api/state").await.1).unwrap()
    }

    async fn wait(&self, pred: impl Fn(&StateSnapshot) -> bool) -> StateSnapshot {
        let deadline = Instant::now() + WAIT;
        loop {
            let s = self.state().await;
            if pred(&s) {
                return s;
            }
            assert!(Instant::now() < deadline, "timed out; last state {s:?}");
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }
}

fn schema() -> jsonschema::Validator {
    let text = include_str!("../schema/state.schema.json");
    jsonschema::validator_for(&serde_json::from_str(text).unwrap()).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}\n{doc}");
}

fn at_decision(s: &StateSnapshot) -> bool {
    s.status == SessionStatus::AtDecision
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn state_responses_match_committed_schema() {
    let s = server(0.0).await;
    let v = schema();
    let (code, idle) = s.get("/api/state").await;
    assert_eq!(code, 200);
    assert_valid(&v, &idle);
    assert_eq!(s.post("/api/control", r#"{"command":"start"}"#).await.0, 200);
    s.wait(at_decision).await;
    let (_, live) = s.get("/api/state").await;
    assert!(live["pending"].is_object() && live["env"].is_object() && live["observation"].is_object());
    assert_valid(&v, &live);
    let body = json!({ "failure": true, "semantic": "lift first", "instruction_id": 5 }).to_string();
    assert_eq!(s.post("/api/intervention", &body).await.0, 200);
    s.wait(|x| at_decision(x) && x.period == 1).await;
    let (_, after) = s.get("/api/state").await;
    assert_eq!(after["interventions"].as_array().unwrap().len(), 1);
    assert_valid(&v, &after);
    assert_eq!(s.post("/api/control", r#"{"command":"reset"}"#).await.0, 200);
    s.wait(|x| x.status == SessionStatus::Idle && x.last_result.is_some()).await;
    let (_, done) = s.get("/api/state").await;
    assert_valid(&v, &done);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn schema_rejects_drifted_documents() {
    let s = server(0.0).await;
    let v = schema();
    let (_, mut doc) = s.get("/api/state").await;
    doc["extra"] = json!(1);
    assert!(!v.is_valid(&doc));
    let (_, mut doc) = s.get("/api/state").await;
    doc.as_object_mut().unwrap().remove("paused");
    assert!(!v.is_valid(&doc));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn intervention_errors_map_to_status_codes() {
    let s = server(0.0).await;
    let ok = json!({ "failure": true, "semantic": "", "instruction_id": 3 }).to_string();
    let (code, body) = s.post("/api/intervention", &ok).await;
    assert_eq!(code, 409, "{body}");
    let bad_id = json!({ "failure": true, "instruction_id": 37 }).to_string();
    assert_eq!(s.post("/api/intervention", &bad_id).await.0, 400);
    assert_eq!(s.post("/api/intervention", "{not json").await.0, 400);
    assert_eq!(s.post("/api/control", r#"{"command":"jump"}"#).await.0, 400);
    assert_eq!(s.post("/api/control", r#"{"command":"start"}"#).await.0, 200);
    s.wait(at_decision).await;
    let (code, body) = s.post("/api/control", r#"{"command":"start"}"#).await;
    assert_eq!(code, 409);
    assert!(body["error"].as_str().unwrap().contains("already running"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn vocab_endpoint_lists_all_instructions() {
    let s = server(0.0).await;
    let (code, body) = s.get("/api/vocab").await;
    assert_eq!(code, 200);
    let entries = body["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 37);
    for (i, e) in entries.iter().enumerate() {
        assert_eq!(e["id"], json!(i));
        assert_eq!(e["text"].as_str().unwrap(), s.vocab.text(InstructionId(i)));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn accepted_instruction_is_executed_next() {
    let s = server(0.0).await;
    s.post("/api/control", r#"{"command":"start"}"#).await;
    let snap = s.wait(at_decision).await;
    let shown = snap.pending.unwrap().m_i;
    let chosen = s.vocab.find_text("move arm backward with gripper open").unwrap();
    assert_ne!(shown, chosen);
    let body = json!({ "failure": true, "semantic": "wrong way", "instruction_id": chosen.0 }).to_string();
    let (_, ev) = s.post("/api/intervention", &body).await;
    assert_eq!(ev["chosen"], json!(chosen.0));
    assert_eq!(ev["shown"], json!(shown.0));
    let next = s.wait(|x| at_decision(x) && x.period == 1).await;
    assert_eq!(next.history[0].m_d, chosen);
    assert!(next.history[0].human);
    s.post("/api/control", r#"{"command":"reset"}"#).await;
    s.wait(|x| x.status == SessionStatus::Idle && x.last_result.is_some()).await;
    let eps = s.session.episodes();
    assert_eq!(eps[0].decisions[0].m_d, chosen);
    let recs = s.session.corrections();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].m_a, Some(chosen));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_delivers_snapshots_in_revision_order() {
    let s = server(0.0).await;
    let mut resp = s.http.get(format!("{}/api/stream", s.base)).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    s.post("/api/control", r#"{"command":"start"}"#).await;
    let mut buf = String::new();
    let mut revisions = Vec::new();
    let deadline = Instant::now() + WAIT;
    let mut decided = false;
    while !decided {
        assert!(Instant::now() < deadline, "no decision snapshot on the stream");
        let chunk = tokio::time::timeout(WAIT, resp.chunk()).await.unwrap().unwrap().unwrap();
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            if let Some(data) = frame.lines().find_map(|l| l.strip_prefix("data: ")) {
                assert!(frame.lines().any(|l| l == "event: state"));
                let snap: StateSnapshot = serde_json::from_str(data).unwrap();
                revisions.push(snap.revision);
                decided |= at_decision(&snap);
            }
        }
    }
    assert!(revisions.len() >= 2);
    assert!(revisions.windows(2).all(|w| w[0] < w[1]), "{revisions:?}");
}

/// A client that always answers with the oracle instruction matches the
/// oracle predictor's success on the same seeds, although the model's own
/// predictions are replaced at random every period.
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn oracle_client_reaches_oracle_success() {
    let episodes = 6;
    let s = server(1.0).await;
    let annotation = AnnotationConfig::default();
    let ctx = Arc::new(OracleContext::new(TaskSpec::pick_place(), Default::default(), annotation, s.vocab.clone()));
    let mut client_successes = 0;
    for ep in 0..episodes {
        assert_eq!(s.post("/api/control", r#"{"command":"start"}"#).await.0, 200);
        loop {
            let snap = s
                .wait(|x| {
                    at_decision(x)
                        || (x.status == SessionStatus::Idle && x.episode == ep + 1 && x.last_result.is_some())
                })
                .await;
            if snap.status == SessionStatus::Idle {
                let result = snap.last_result.unwrap();
                assert_eq!(result.episode, ep + 1);
                client_successes += result.success as usize;
                break;
            }
            let want = ctx.oracle_instruction(snap.observation.as_ref().unwrap());
            let shown = snap.pending.unwrap().m_i;
            let body = if want == shown {
                json!({ "failure": false })
            } else {
                json!({ "failure": true, "semantic": "oracle", "instruction_id": want.0 })
            };
            let (code, body) = s.post("/api/intervention", &body.to_string()).await;
            assert_eq!(code, 200, "{body}");
            s.wait(|x| !(at_decision(x) && x.period == snap.period && x.episode == snap.episode)).await;
        }
    }
    let seeds: Vec<u64> = s.session.episodes().iter().map(|r| r.seed).collect();
    let mut oracle_successes = 0;
    for seed in seeds {
        let cfg = motionloop_core::control::EpisodeConfig { budget: ctx.spec.max_periods, ..Default::default() };
        let mut mpm = oracle_predictor(ctx.clone());
        let mut policy = instruction_follower(ctx.clone());
        let parts = Components { mpm: &mut mpm, mcm: None, policy: &mut policy, hook: None };
        oracle_successes += run_episode(&ctx.spec, &ctx.sim, &cfg, seed, parts).unwrap().success as usize;
    }
    assert_eq!(client_successes, oracle_successes);
    assert!(oracle_successes >= episodes as usize - 1);
}
