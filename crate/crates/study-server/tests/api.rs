use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use eventxai_core::dataset::Split;
use eventxai_core::eval::{Evaluation, SamplePrediction};
use eventxai_core::study::{overlay_path, read_vote_log, CreateStudy, StudyReport, StudyStore, VOTE_LOG_FILE};
use eventxai_study_server::{router, CreatedStudy, ErrorBody, NextTask};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    dir: tempfile::TempDir,
    request: CreateStudy,
}

impl Fixture {
    /// Six predictions over two classes, one of them wrong.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let overlays = dir.path().join("overlays");
        let preds = [
            ("fire/a.png", 0, 0),
            ("fire/b.png", 0, 0),
            ("fire/c.png", 0, 1),
            ("flood/d.png", 1, 1),
            ("flood/e.png", 1, 1),
            ("flood/f g.png", 1, 1),
        ];
        let mut predictions = Vec::new();
        for (id, t, p) in preds {
            let original = data.join(id);
            std::fs::create_dir_all(original.parent().unwrap()).unwrap();
            std::fs::write(&original, format!("original {id}")).unwrap();
            let overlay = overlay_path(&overlays, id);
            std::fs::create_dir_all(overlay.parent().unwrap()).unwrap();
            std::fs::write(&overlay, format!("overlay {id}")).unwrap();
            predictions.push(SamplePrediction {
                sample_id: id.into(),
                true_class: t,
                predicted_class: p,
                probabilities: vec![0.5, 0.5],
            });
        }
        let evaluation =
            Evaluation::from_predictions(Split::Test, vec!["fire".into(), "flood".into()], predictions).unwrap();
        let request = CreateStudy { evaluation, image_root: data, overlay_dir: overlays, votes_needed: 3 };
        Self { dir, request }
    }

    fn store_root(&self) -> std::path::PathBuf {
        self.dir.path().join("store")
    }

    fn app(&self) -> Router {
        router(Arc::new(StudyStore::open(&self.store_root()).unwrap()))
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(v) => builder.header(header::CONTENT_TYPE, "application/json").body(Body::from(v.to_string())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let content_type = response.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, content_type)
}

async fn json_call<T: serde::de::DeserializeOwned>(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, T) {
    let (status, bytes, _) = call(app, method, uri, body).await;
    let parsed = serde_json::from_slice(&bytes)
        .unwrap_or_else(|e| panic!("{method} {uri} -> {status}: {e}: {}", String::from_utf8_lossy(&bytes)));
    (status, parsed)
}

async fn create(app: &Router, request: &CreateStudy) -> String {
    let (status, created): (_, CreatedStudy) =
        json_call(app, "POST", "/studies", Some(serde_json::to_value(request).unwrap())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created.tasks, 5);
    created.study_id
}

async fn register(app: &Router, who: &str) {
    let (status, _, _) = call(app, "POST", "/annotators", Some(json!({ "annotator_id": who }))).await;
    assert_eq!(status, StatusCode::CREATED);
}

async fn vote(app: &Router, study: &str, who: &str, sample: &str, label: i64) -> (StatusCode, Value) {
    json_call(
        app,
        "POST",
        &format!("/studies/{study}/votes"),
        Some(json!({ "sample_id": sample, "annotator_id": who, "label": label })),
    )
    .await
}

#[tokio::test]
async fn full_study_round_trip() {
    let fx = Fixture::new();
    let app = fx.app();
    let study = create(&app, &fx.request).await;
    register(&app, "ann1").await;

    let (status, next): (_, NextTask) = json_call(&app, "GET", &format!("/studies/{study}/tasks/next?annotator=ann1"), None).await;
    assert_eq!(status, StatusCode::OK);
    let task = next.task.unwrap();
    assert_eq!((task.sample_id.as_str(), task.votes_received, task.class_name.as_str()), ("fire/a.png", 0, "fire"));
    assert_eq!((next.progress.answered, next.progress.total), (0, 5));

    let (status, bytes, ctype) = call(&app, "GET", &task.image_url, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, b"original fire/a.png");
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let (_, bytes, _) = call(&app, "GET", &task.overlay_url, None).await;
    assert_eq!(bytes, b"overlay fire/a.png");

    let (status, ack) = vote(&app, &study, "ann1", "fire/a.png", 1).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(ack["votes_received"], 1);
    assert_eq!(ack["resolved_label"], Value::Null);

    let (status, err) = vote(&app, &study, "ann1", "fire/a.png", 1).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::CONFLICT, Some("DuplicateVote")));
    let (status, err) = vote(&app, &study, "ann1", "fire/b.png", 2).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("InvalidLabel")));
    let (status, err) = vote(&app, &study, "ann1", "fire/c.png", 1).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownTask")));

    let (status, err): (_, ErrorBody) = json_call(&app, "GET", &format!("/studies/{study}/report"), None).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::CONFLICT, "NoResolvedTasks"));

    // Two more annotators resolve fire/a.png to 1 and flood/d.png to 0.
    register(&app, "ann2").await;
    register(&app, "ann3").await;
    for (who, a, d) in [("ann2", 1, 0), ("ann3", 0, 0)] {
        assert_eq!(vote(&app, &study, who, "fire/a.png", a).await.0, StatusCode::CREATED);
        assert_eq!(vote(&app, &study, who, "flood/d.png", d).await.0, StatusCode::CREATED);
    }
    let (_, ack) = vote(&app, &study, "ann1", "flood/d.png", 1).await;
    assert_eq!(ack["resolved_label"], 0);
    let (status, err) = vote(&app, &study, "ann4", "fire/a.png", 1).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownAnnotator")));
    register(&app, "ann4").await;
    let (status, err) = vote(&app, &study, "ann4", "fire/a.png", 1).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::CONFLICT, Some("ResolvedTask")));

    let (status, report): (_, StudyReport) = json_call(&app, "GET", &format!("/studies/{study}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report.per_class[0].accuracy, Some(1.0));
    assert_eq!(report.per_class[1].accuracy, Some(0.0));
    assert_eq!(report.weighted_average, 0.5);
    assert_eq!((report.resolved_tasks, report.unresolved_tasks, report.total_votes), (2, 3, 6));

    // The vote log is JSON lines, one record per accepted vote.
    let log = read_vote_log(&fx.store_root().join("studies").join(&study).join(VOTE_LOG_FILE)).unwrap();
    assert_eq!(log.len(), 6);
    assert!(log.iter().all(|v| v.label <= 1));

    // A restarted service replays the log into the same report.
    let restarted = fx.app();
    let (_, again): (_, StudyReport) = json_call(&restarted, "GET", &format!("/studies/{study}/report"), None).await;
    assert_eq!(again, report);
}

#[tokio::test]
async fn annotator_who_voted_everything_gets_no_task() {
    let fx = Fixture::new();
    let app = fx.app();
    let study = create(&app, &fx.request).await;
    register(&app, "solo").await;
    let mut seen = Vec::new();
    loop {
        let (_, next): (_, NextTask) = json_call(&app, "GET", &format!("/studies/{study}/tasks/next?annotator=solo"), None).await;
        let Some(task) = next.task else {
            assert_eq!((next.progress.answered, next.progress.total), (5, 5));
            break;
        };
        seen.push(task.sample_id.clone());
        assert_eq!(vote(&app, &study, "solo", &task.sample_id, 1).await.0, StatusCode::CREATED);
    }
    assert_eq!(seen, vec!["fire/a.png", "fire/b.png", "flood/d.png", "flood/e.png", "flood/f g.png"]);
}

#[tokio::test]
async fn fewer_votes_are_served_first() {
    let fx = Fixture::new();
    let app = fx.app();
    let study = create(&app, &fx.request).await;
    for who in ["a", "b", "c"] {
        register(&app, who).await;
    }
    vote(&app, &study, "a", "fire/a.png", 1).await;
    vote(&app, &study, "b", "fire/a.png", 1).await;
    vote(&app, &study, "a", "fire/b.png", 1).await;
    vote(&app, &study, "a", "flood/d.png", 1).await;
    vote(&app, &study, "a", "flood/e.png", 1).await;
    vote(&app, &study, "a", "flood/f g.png", 1).await;
    // fire/a.png has 2 votes, every other task 1.
    let (_, next): (_, NextTask) = json_call(&app, "GET", &format!("/studies/{study}/tasks/next?annotator=c"), None).await;
    assert_eq!(next.task.unwrap().sample_id, "fire/b.png");
}

#[tokio::test]
async fn request_errors_are_json() {
    let fx = Fixture::new();
    let app = fx.app();
    let study = create(&app, &fx.request).await;

    let (status, err): (_, ErrorBody) = json_call(&app, "GET", "/studies/nope/report", None).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::NOT_FOUND, "UnknownStudy"));
    let (status, err): (_, ErrorBody) = json_call(&app, "GET", &format!("/studies/{study}/tasks/next"), None).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::BAD_REQUEST, "BadRequest"));
    let (status, err): (_, ErrorBody) =
        json_call(&app, "GET", &format!("/studies/{study}/tasks/next?annotator=ghost"), None).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::NOT_FOUND, "UnknownAnnotator"));
    let (status, err): (_, ErrorBody) = json_call(&app, "POST", "/annotators", Some(json!({ "name": "x" }))).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::BAD_REQUEST, "BadRequest"));
    let (status, err): (_, ErrorBody) = json_call(&app, "POST", "/annotators", Some(json!({ "annotator_id": "" }))).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "InvalidAnnotator"));
    let (status, err): (_, ErrorBody) = json_call(&app, "GET", "/media/fire/a.png/thumbnail", None).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::BAD_REQUEST, "BadRequest"));
    let (status, err): (_, ErrorBody) = json_call(&app, "GET", "/media/fire/c.png/original", None).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::NOT_FOUND, "UnknownTask"));
    let (status, err): (_, ErrorBody) = json_call(&app, "GET", "/media/..%2F..%2Fetc%2Fpasswd/original", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{err:?}");

    // Media lookups without ?study= search every study.
    let (status, bytes, _) = call(&app, "GET", "/media/flood/f%20g.png/overlay", None).await;
    assert_eq!((status, bytes.as_slice()), (StatusCode::OK, b"overlay flood/f g.png".as_slice()));

    let (status, ids): (_, Vec<String>) = json_call(&app, "GET", "/studies", None).await;
    assert_eq!((status, ids), (StatusCode::OK, vec![study]));
}

#[tokio::test]
async fn study_creation_errors() {
    let fx = Fixture::new();
    let app = fx.app();
    std::fs::remove_file(overlay_path(&fx.request.overlay_dir, "flood/e.png")).unwrap();
    let (status, err): (_, ErrorBody) =
        json_call(&app, "POST", "/studies", Some(serde_json::to_value(&fx.request).unwrap())).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "MissingOverlay"));
    assert!(err.message.contains("flood/e.png"));

    let mut wrong = fx.request.clone();
    wrong.evaluation.predictions.iter_mut().for_each(|p| p.predicted_class = 1 - p.true_class);
    let (status, err): (_, ErrorBody) = json_call(&app, "POST", "/studies", Some(serde_json::to_value(&wrong).unwrap())).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "EmptyStudy"));

    let mut even = fx.request.clone();
    even.votes_needed = 4;
    let (status, err): (_, ErrorBody) = json_call(&app, "POST", "/studies", Some(serde_json::to_value(&even).unwrap())).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "InvalidQuorum"));

    let (status, err): (_, ErrorBody) = json_call(&app, "POST", "/studies", Some(json!({ "evaluation": 3 }))).await;
    assert_eq!((status, err.error.as_str()), (StatusCode::BAD_REQUEST, "BadRequest"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_votes_resolve_at_quorum() {
    let fx = Fixture::new();
    let app = fx.app();
    let study = create(&app, &fx.request).await;
    let annotators: Vec<String> = (0..10).map(|i| format!("worker{i}")).collect();
    for a in &annotators {
        register(&app, a).await;
    }
    let handles: Vec<_> = annotators
        .iter()
        .map(|a| {
            let (app, study, a) = (app.clone(), study.clone(), a.clone());
            tokio::spawn(async move { vote(&app, &study, &a, "flood/e.png", 1).await.0 })
        })
        .collect();
    let mut created = 0;
    for h in handles {
        let status = h.await.unwrap();
        assert!(status == StatusCode::CREATED || status == StatusCode::CONFLICT);
        created += usize::from(status == StatusCode::CREATED);
    }
    assert_eq!(created, 3);
    let log = read_vote_log(&fx.store_root().join("studies").join(&study).join(VOTE_LOG_FILE)).unwrap();
    assert_eq!(log.len(), 3);
}
