use std::sync::Mutex;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use hairproxy_core::generator::{truncation_init, GeneratorBackend, ToyGenerator};
use hairproxy_core::io::{decode_image, encode_image_png};
use hairproxy_core::pipeline::Budgets;
use hairproxy_core::{
    ColorCondition, EditRequest, Engine, HairstyleCondition, Image, Progress, RecipeFile,
};
use hairproxy_service::{Service, ServiceOptions};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

fn budgets(invert: usize) -> Budgets {
    Budgets {
        invert_steps: invert,
        fs_steps: 5,
        text_steps: 8,
        reference_steps: 5,
        color_steps: 5,
        final_steps: 5,
        ..Budgets::default()
    }
}

fn engine(invert: usize) -> Engine {
    Engine {
        budgets: budgets(invert),
        ..Engine::toy()
    }
}

fn options(dir: &std::path::Path) -> ServiceOptions {
    ServiceOptions {
        store_dir: dir.to_path_buf(),
        session_ttl: Duration::from_secs(3600),
        queue_capacity: 4,
        sweep_interval: Duration::from_millis(50),
    }
}

fn source(seed: u64) -> Image {
    let gen = ToyGenerator::default();
    let w = truncation_init(gen.mean_latent(), &gen.sample_random_latent(seed), 0.6).unwrap();
    gen.synthesize(&w).unwrap()
}

fn text_recipe(text: &str, seed: u64) -> String {
    RecipeFile::from_request(&EditRequest {
        hairstyle: Some(HairstyleCondition::Text(text.into())),
        seed,
        ..Default::default()
    })
    .unwrap()
    .to_json()
    .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, headers, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    let (s, _, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, b)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = get(app, uri).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn upload(app: &Router, img: &Image, seed: u64) -> (StatusCode, Value) {
    let boundary = "XBOUNDARYX";
    let mut body = Vec::new();
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"seed\"\r\n\r\n{seed}\r\n\
             --{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"src.png\"\r\n\
             Content-Type: image/png\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(&encode_image_png(img).unwrap());
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let req = Request::post("/sessions")
        .header(
            header::CONTENT_TYPE,
            format!("multipart/form-data; boundary={boundary}"),
        )
        .body(Body::from(body))
        .unwrap();
    let (s, _, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn submit(
    app: &Router,
    session: &str,
    recipe: &str,
) -> (StatusCode, axum::http::HeaderMap, Value) {
    let req = Request::post(format!("/sessions/{session}/edits"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(recipe.to_string()))
        .unwrap();
    let (s, h, b) = send(app, req).await;
    (s, h, serde_json::from_slice(&b).unwrap())
}

async fn wait_ready(app: &Router, session: &str) {
    for _ in 0..600 {
        let (_, v) = get_json(app, &format!("/sessions/{session}")).await;
        match v["status"].as_str().unwrap() {
            "ready" => return,
            "failed" => panic!("precompute failed: {v}"),
            _ => tokio::time::sleep(Duration::from_millis(20)).await,
        }
    }
    panic!("session never became ready");
}

async fn wait_done(app: &Router, job: &str) -> Value {
    for _ in 0..600 {
        let (s, v) = get_json(app, &format!("/jobs/{job}?wait_ms=1000")).await;
        assert_eq!(s, StatusCode::OK);
        if matches!(v["state"].as_str(), Some("done") | Some("failed")) {
            return v;
        }
    }
    panic!("job never finished");
}

async fn ready_session(app: &Router, seed: u64) -> String {
    let (s, v) = upload(app, &source(seed), seed).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let id = v["id"].as_str().unwrap().to_string();
    wait_ready(app, &id).await;
    id
}

#[tokio::test(flavor = "multi_thread")]
async fn health_responds() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(engine(5), &options(dir.path())).unwrap();
    let (s, v) = get_json(&svc.router(), "/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["generator"], "toy");
}

#[tokio::test(flavor = "multi_thread")]
async fn edit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(engine(10), &options(dir.path())).unwrap();
    let app = svc.router();
    let session = ready_session(&app, 3).await;

    let (s, _, v) = submit(&app, &session, &text_recipe("short curly hair", 1)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let job = v["id"].as_str().unwrap().to_string();
    let done = wait_done(&app, &job).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["result_id"], job.as_str());

    let (s, png) = get(&app, &format!("/jobs/{job}/result")).await;
    assert_eq!(s, StatusCode::OK);
    let img = decode_image(&png).unwrap();
    assert_eq!((img.height(), img.width()), (32, 32));

    let (s, report) = get_json(&app, &format!("/jobs/{job}/report")).await;
    assert_eq!(s, StatusCode::OK);
    let stages: Vec<&str> = report["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|st| st["stage"].as_str().unwrap())
        .collect();
    assert!(stages.contains(&"text_proxy"), "{stages:?}");
    assert!(!report["timings"].as_array().unwrap().is_empty());

    let (_, v) = get_json(&app, &format!("/sessions/{session}")).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 1);
    assert_eq!(v["history"][0]["job_id"], job.as_str());
    assert_eq!(v["history"][0]["outcome"], "done");
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(engine(5), &options(dir.path())).unwrap();
    let app = svc.router();
    let nope = "0".repeat(32);
    assert_eq!(
        get(&app, &format!("/sessions/{nope}")).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        get(&app, &format!("/jobs/{nope}")).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        get(&app, &format!("/jobs/{nope}/result")).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        get(&app, &format!("/jobs/{nope}/events")).await.0,
        StatusCode::NOT_FOUND
    );
    let (s, _, _) = submit(&app, &nope, &text_recipe("bob", 0)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_uploads_and_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(engine(5), &options(dir.path())).unwrap();
    let app = svc.router();

    let (s, _) = upload(&app, &Image::filled(16, 16, [0.5; 3]), 0).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let session = ready_session(&app, 1).await;
    let (s, _, _) = submit(&app, &session, "{ not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, v) = submit(
        &app,
        &session,
        r#"{"hairstyle": {"reference": {"path": "/etc/hostname"}}}"#,
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("not accepted"), "{v}");
    let (s, _, _) = submit(&app, &session, r#"{"seed": 1}"#).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let rgb = RecipeFile::from_request(&EditRequest {
        color: Some(ColorCondition::Rgb([1.5, 0.0, 0.0])),
        ..Default::default()
    })
    .unwrap()
    .to_json()
    .unwrap();
    let (s, _, _) = submit(&app, &session, &rgb).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn pending_session_asks_to_retry() {
    let dir = tempfile::tempdir().unwrap();
    // Long enough that the upload is still being prepared on submit.
    let svc = Service::start(engine(400), &options(dir.path())).unwrap();
    let app = svc.router();
    let (_, v) = upload(&app, &source(2), 0).await;
    assert_eq!(v["status"], "pending");
    let id = v["id"].as_str().unwrap();
    let (s, h, _) = submit(&app, id, &text_recipe("bob", 0)).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(h.contains_key(header::RETRY_AFTER));
    wait_ready(&app, id).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn full_queue_backpressures() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(engine(5), &options(dir.path())).unwrap();
    let app = svc.router();
    let session = ready_session(&app, 4).await;
    let mut slow = RecipeFile::from_json(&text_recipe("long hair", 0)).unwrap();
    slow.budgets = Some(Budgets {
        text_steps: 150,
        ..budgets(5)
    });
    let slow = slow.to_json().unwrap();

    // One running plus `queue_capacity` waiting; the next is refused.
    let (s, _, first) = submit(&app, &session, &slow).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let first = first["id"].as_str().unwrap().to_string();
    for _ in 0..200 {
        let (_, v) = get_json(&app, &format!("/jobs/{first}")).await;
        if v["state"] != "queued" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let mut accepted = vec![first];
    let mut refused = 0;
    for _ in 0..6 {
        let (s, h, v) = submit(&app, &session, &slow).await;
        match s {
            StatusCode::ACCEPTED => accepted.push(v["id"].as_str().unwrap().to_string()),
            StatusCode::TOO_MANY_REQUESTS => {
                assert!(h.contains_key(header::RETRY_AFTER));
                refused += 1;
            }
            other => panic!("unexpected {other}: {v}"),
        }
    }
    assert_eq!(accepted.len(), 5);
    assert_eq!(refused, 2);
    svc.drain().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_jobs_complete_in_order_and_share_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(engine(10), &options(dir.path())).unwrap();
    let app = svc.router();
    let session = ready_session(&app, 5).await;
    let recipe = text_recipe("wavy hair", 9);
    let (a, b) = tokio::join!(
        submit(&app, &session, &recipe),
        submit(&app, &session, &recipe)
    );
    let ids = [
        a.2["id"].as_str().unwrap().to_string(),
        b.2["id"].as_str().unwrap().to_string(),
    ];
    for id in &ids {
        assert_eq!(wait_done(&app, id).await["state"], "done");
    }
    // Same request on the same cached source state gives the same bytes.
    let ra = get(&app, &format!("/jobs/{}/result", ids[0])).await.1;
    let rb = get(&app, &format!("/jobs/{}/result", ids[1])).await.1;
    assert_eq!(ra, rb);

    let (_, v) = get_json(&app, &format!("/sessions/{session}")).await;
    let hist = v["history"].as_array().unwrap();
    assert_eq!(hist.len(), 2);
    let t: Vec<u64> = hist
        .iter()
        .map(|h| h["completed_unix_s"].as_u64().unwrap())
        .collect();
    assert!(t[0] <= t[1]);
    let hist_ids: Vec<&str> = hist.iter().map(|h| h["job_id"].as_str().unwrap()).collect();
    assert!(hist_ids.contains(&ids[0].as_str()) && hist_ids.contains(&ids[1].as_str()));
}

struct Recorder(Mutex<Vec<(String, usize, f64)>>);

impl Progress for Recorder {
    fn report(&self, stage: &str, step: usize, loss: f64) {
        self.0.lock().unwrap().push((stage.into(), step, loss));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn event_stream_carries_exact_optimizer_losses() {
    let dir = tempfile::tempdir().unwrap();
    let eng = engine(10);
    let svc = Service::start(eng.clone(), &options(dir.path())).unwrap();
    let app = svc.router();
    let session = ready_session(&app, 6).await;
    let recipe = text_recipe("short hair", 2);
    let (_, _, v) = submit(&app, &session, &recipe).await;
    let job = v["id"].as_str().unwrap().to_string();
    // The stream ends once the job reaches a terminal state.
    let (s, body) = get(&app, &format!("/jobs/{job}/events")).await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    let mut streamed = Vec::new();
    let mut last_state = String::new();
    let mut event = "";
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("event: ") {
            event = name;
        } else if let Some(data) = line.strip_prefix("data: ") {
            let v: Value = serde_json::from_str(data).unwrap();
            match event {
                "progress" => streamed.push((
                    v["stage"].as_str().unwrap().to_string(),
                    v["step"].as_u64().unwrap() as usize,
                    v["loss"].as_f64().unwrap(),
                )),
                "state" => last_state = v["state"].as_str().unwrap().to_string(),
                other => panic!("unexpected event {other}"),
            }
        }
    }
    assert_eq!(last_state, "done");

    let rec = Recorder(Mutex::new(Vec::new()));
    // The service sees the uploaded PNG, not the float image.
    let uploaded = decode_image(&encode_image_png(&source(6)).unwrap()).unwrap();
    let src = eng
        .prepare_source(&uploaded, 6, &hairproxy_core::NoProgress)
        .unwrap();
    let req = RecipeFile::from_json(&recipe)
        .unwrap()
        .to_request(hairproxy_core::Resolve::InlineOnly)
        .unwrap();
    eng.edit(&src, &req, &rec).unwrap();
    let direct = rec.0.into_inner().unwrap();
    assert!(!direct.is_empty());
    assert_eq!(streamed, direct);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(engine(10), &options(dir.path())).unwrap();
    let app = svc.router();
    let session = ready_session(&app, 7).await;
    let (_, _, v) = submit(&app, &session, &text_recipe("bob", 0)).await;
    let job = v["id"].as_str().unwrap().to_string();
    wait_done(&app, &job).await;
    let before = get(&app, &format!("/jobs/{job}/result")).await.1;
    svc.drain().await;

    let svc = Service::start(engine(10), &options(dir.path())).unwrap();
    let app = svc.router();
    let (s, v) = get_json(&app, &format!("/sessions/{session}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ready");
    assert_eq!(v["history"][0]["job_id"], job.as_str());
    let (s, after) = get(&app, &format!("/jobs/{job}/result")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(before, after);

    let (s, _, v) = submit(&app, &session, &text_recipe("bob", 0)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job2 = v["id"].as_str().unwrap().to_string();
    assert_eq!(wait_done(&app, &job2).await["state"], "done");
    let (_, v) = get_json(&app, &format!("/sessions/{session}")).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn expired_sessions_are_evicted() {
    let dir = tempfile::tempdir().unwrap();
    let opts = ServiceOptions {
        session_ttl: Duration::from_secs(1),
        ..options(dir.path())
    };
    let svc = Service::start(engine(5), &opts).unwrap();
    let app = svc.router();
    let (_, v) = upload(&app, &source(8), 0).await;
    let id = v["id"].as_str().unwrap().to_string();
    assert!(dir.path().join(&id).is_dir());
    tokio::time::sleep(Duration::from_millis(2200)).await;
    assert_eq!(
        get(&app, &format!("/sessions/{id}")).await.0,
        StatusCode::NOT_FOUND
    );
    assert!(!dir.path().join(&id).exists());
}

#[tokio::test(flavor = "multi_thread")]
async fn drain_finishes_queued_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(engine(10), &options(dir.path())).unwrap();
    let app = svc.router();
    let session = ready_session(&app, 9).await;
    let mut ids = Vec::new();
    for seed in 0..2 {
        let (s, _, v) = submit(&app, &session, &text_recipe("bob", seed)).await;
        assert_eq!(s, StatusCode::ACCEPTED);
        ids.push(v["id"].as_str().unwrap().to_string());
    }
    svc.drain().await;
    let (s, _, _) = submit(&app, &session, &text_recipe("bob", 5)).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    for id in ids {
        let (_, v) = get_json(&app, &format!("/jobs/{id}")).await;
        assert_eq!(v["state"], "done");
    }
}
