mod common;

use axum::http::StatusCode;
use common::*;
use forge_core::image::{ImageGrid, RegionMask};
use forge_core::pipeline::{replay, EditPlan};
use serde_json::{json, Value};

async fn new_session(fx: &Fixture, img: &ImageGrid) -> (String, Value) {
    let (status, body) = post(&fx.router(), "/sessions", json!({"image": b64_image(img), "seed": 5})).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    (body["id"].as_str().unwrap().to_owned(), body)
}

fn step_body(mask: &RegionMask, direction: &str) -> Value {
    json!({"mask": b64_mask(mask), "direction": direction, "strategy": "random"})
}

#[tokio::test]
async fn unknown_session_is_404() {
    let fx = Fixture::new();
    let router = fx.router();
    let missing = uuid::Uuid::new_v4();
    let (status, body) = get(&router, &format!("/sessions/{missing}")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not_found");
    let (status, _) = post(&router, &format!("/sessions/{missing}/step"), step_body(&rect_mask(0, 8, 0, 8), "attenuate")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = post(&router, "/sessions/not-a-uuid/undo", json!({})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn step_reports_feedback_and_mask_round_trips() {
    let fx = Fixture::new();
    let img = image(0);
    let (id, _) = new_session(&fx, &img).await;
    let mask = rect_mask(4, 20, 4, 20);
    let (status, body) = post(&fx.router(), &format!("/sessions/{id}/step"), step_body(&mask, "attenuate")).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(body["s"].as_f64().unwrap().is_finite());
    assert!(body["delta_r"].as_f64().unwrap().is_finite());
    for key in ["image", "saliency_pre", "saliency_post"] {
        let png = ImageGrid::decode(&decode_b64(body[key].as_str().unwrap())).unwrap();
        assert_eq!((png.height(), png.width()), (SIDE, SIDE), "{key}");
    }
    assert_eq!(body["step"]["mask_ref"], mask.content_hash());
    let (_, plan) = get(&fx.router(), &format!("/sessions/{id}/plan")).await;
    let plan: EditPlan = serde_json::from_value(plan).unwrap();
    assert_eq!(plan.masks[&mask.content_hash()].content_hash(), mask.content_hash());
}

#[tokio::test]
async fn step_then_undo_restores_hash() {
    let fx = Fixture::new();
    let img = image(1);
    let (id, created) = new_session(&fx, &img).await;
    let before = created["image_hash"].clone();
    assert_eq!(before, img.content_hash());
    let (status, stepped) = post(&fx.router(), &format!("/sessions/{id}/step"), step_body(&rect_mask(0, 16, 0, 32), "amplify")).await;
    assert_eq!(status, StatusCode::OK, "{stepped}");
    assert_ne!(stepped["image_hash"], before);

    let (status, undone) = post(&fx.router(), &format!("/sessions/{id}/undo"), json!({})).await;
    assert_eq!(status, StatusCode::OK, "{undone}");
    assert_eq!(undone["image_hash"], before);
    assert_eq!(undone["active"], 0);
    assert_eq!(undone["recorded_steps"], 1);

    let (status, body) = post(&fx.router(), &format!("/sessions/{id}/undo"), json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "nothing_to_undo");
}

#[tokio::test]
async fn new_step_after_undo_replaces_tail() {
    let fx = Fixture::new();
    let (id, _) = new_session(&fx, &image(2)).await;
    let uri = format!("/sessions/{id}/step");
    post(&fx.router(), &uri, step_body(&rect_mask(0, 16, 0, 16), "attenuate")).await;
    post(&fx.router(), &format!("/sessions/{id}/undo"), json!({})).await;
    let (status, body) = post(&fx.router(), &uri, step_body(&rect_mask(16, 32, 16, 32), "attenuate")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["session"]["active"], 1);
    assert_eq!(body["session"]["recorded_steps"], 1);
}

#[tokio::test]
async fn disjoint_steps_give_replayable_plan() {
    let fx = Fixture::new();
    let img = image(3);
    let (id, _) = new_session(&fx, &img).await;
    let uri = format!("/sessions/{id}/step");
    let (s1, _) = post(&fx.router(), &uri, step_body(&rect_mask(0, 16, 0, 32), "attenuate")).await;
    let (s2, last) = post(&fx.router(), &uri, step_body(&rect_mask(16, 32, 0, 32), "amplify")).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));

    let (_, view) = get(&fx.router(), &format!("/sessions/{id}")).await;
    let plan: EditPlan = serde_json::from_value(view["plan"].clone()).unwrap();
    assert_eq!(plan.steps.len(), 2);
    let replayed = replay(&plan, &img).unwrap();
    assert_eq!(replayed.content_hash(), last["image_hash"].as_str().unwrap());
    assert_eq!(view["image_hash"], last["image_hash"]);
}

#[tokio::test]
async fn step_while_session_locked_is_409() {
    let fx = Fixture::new();
    let (id, _) = new_session(&fx, &image(4)).await;
    let lock = fx.state.session_lock(id.parse().unwrap());
    let guard = lock.lock().await;
    let (status, body) = post(&fx.router(), &format!("/sessions/{id}/step"), step_body(&rect_mask(0, 8, 0, 8), "attenuate")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "session_busy");
    drop(guard);
    let (status, _) = post(&fx.router(), &format!("/sessions/{id}/step"), step_body(&rect_mask(0, 8, 0, 8), "attenuate")).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_steps_never_interleave() {
    let fx = Fixture::new();
    let (id, _) = new_session(&fx, &image(5)).await;
    let uri = format!("/sessions/{id}/step");
    let body = json!({"mask": b64_mask(&rect_mask(0, 32, 0, 32)), "direction": "attenuate", "strategy": "best_saliency"});
    let router = fx.router();
    let calls = (0..4).map(|_| {
        let (router, uri, body) = (router.clone(), uri.clone(), body.clone());
        tokio::spawn(async move { post(&router, &uri, body).await.0 })
    });
    let mut statuses = Vec::new();
    for c in calls.collect::<Vec<_>>() {
        statuses.push(c.await.unwrap());
    }
    let ok = statuses.iter().filter(|s| **s == StatusCode::OK).count();
    assert!(ok >= 1);
    assert!(statuses.iter().all(|s| *s == StatusCode::OK || *s == StatusCode::CONFLICT), "{statuses:?}");
    let (_, view) = get(&fx.router(), &format!("/sessions/{id}")).await;
    assert_eq!(view["active"], ok);
}

#[tokio::test]
async fn restart_reproduces_session_outputs() {
    let fx = Fixture::new();
    let img = image(6);
    let (id, _) = new_session(&fx, &img).await;
    let uri = format!("/sessions/{id}/step");
    post(&fx.router(), &uri, step_body(&rect_mask(0, 16, 0, 16), "attenuate")).await;
    let (_, first) = post(&fx.router(), &uri, step_body(&rect_mask(16, 32, 16, 32), "amplify")).await;

    let restarted = forge_service::router(fx.restart());
    let (status, view) = get(&restarted, &format!("/sessions/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["image_hash"], first["image_hash"]);

    // the same requests against a fresh session in the restarted process give the same images
    let (status, again) = post(&restarted, "/sessions", json!({"image": b64_image(&img), "seed": 5})).await;
    assert_eq!(status, StatusCode::CREATED);
    let again_uri = format!("/sessions/{}/step", again["id"].as_str().unwrap());
    post(&restarted, &again_uri, step_body(&rect_mask(0, 16, 0, 16), "attenuate")).await;
    let (_, second) = post(&restarted, &again_uri, step_body(&rect_mask(16, 32, 16, 32), "amplify")).await;
    assert_eq!(second["image_hash"], first["image_hash"]);
    assert_eq!(second["s"], first["s"]);
    assert_eq!(second["delta_r"], first["delta_r"]);
}

#[tokio::test]
async fn session_image_endpoint_serves_png() {
    let fx = Fixture::new();
    let img = image(7);
    let (id, _) = new_session(&fx, &img).await;
    let response = tower::ServiceExt::oneshot(
        fx.router(),
        axum::http::Request::get(format!("/sessions/{id}/image")).body(axum::body::Body::empty()).unwrap(),
    )
    .await
    .unwrap();
    assert_eq!(response.headers()["content-type"], "image/png");
    let bytes = http_body_util::BodyExt::collect(response.into_body()).await.unwrap().to_bytes();
    assert_eq!(ImageGrid::decode(&bytes).unwrap().content_hash(), img.content_hash());
}
