mod common;

use axum::http::StatusCode;
use common::study::{get, post, run_scripted_study, write_afc_trials};
use perceptra::imaging::Image;
use perceptra::study::{
    export, pooled_trials, rating_records, read_judgments, read_sessions, router, Study, StudyMode, StudyTrial,
};
use serde_json::json;

fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().build().unwrap()
}

#[test]
fn scripted_session_of_five_trials() {
    let dir = tempfile::tempdir().unwrap();
    let pool = write_afc_trials(dir.path(), 5);
    let db = dir.path().join("db.jsonl");
    let app = router(Study::open(pool, dir.path(), StudyMode::Afc, &db).unwrap());
    rt().block_on(async {
        let sid = post(&app, "/api/session", json!({ "rater_id": "ada", "mode": "afc", "seed": 3 })).await.json()["session_id"]
            .as_str()
            .unwrap()
            .to_string();
        let mut seen = Vec::new();
        for k in 0..5 {
            let next = get(&app, &format!("/api/session/{sid}/next")).await.json();
            assert_eq!(next["mode"], "afc");
            assert_eq!(next["images"].as_array().unwrap().len(), 3);
            let tid = next["trial_id"].as_str().unwrap().to_string();
            let r = post(&app, &format!("/api/session/{sid}/judgment"), json!({ "trial_id": tid, "payload": { "choice": k % 2 } })).await;
            assert_eq!(r.status, StatusCode::OK);
            assert_eq!(r.json(), json!({ "accepted": true }));
            seen.push(tid);
        }
        assert_eq!(get(&app, &format!("/api/session/{sid}/next")).await.json(), json!({ "done": true }));
        assert_eq!(get(&app, &format!("/api/session/{sid}/progress")).await.json(), json!({ "judged": 5, "total": 5 }));
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 5);
    });
    let records = read_judgments(&db).unwrap();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r.rater_id == "ada" && chrono::DateTime::parse_from_rfc3339(&r.wall_time).is_ok()));
    let out = dir.path().join("export.jsonl");
    assert_eq!(export(&db, &out).unwrap(), 5);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 5);
}

#[test]
fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let pool = write_afc_trials(dir.path(), 3);
    let app = router(Study::open(pool, dir.path(), StudyMode::Afc, dir.path().join("db.jsonl")).unwrap());
    rt().block_on(async {
        assert_eq!(get(&app, "/api/session/nope/next").await.status, StatusCode::NOT_FOUND);
        assert_eq!(get(&app, "/api/session/nope/progress").await.status, StatusCode::NOT_FOUND);
        assert_eq!(post(&app, "/api/session/nope/judgment", json!({})).await.status, StatusCode::NOT_FOUND);
        assert_eq!(get(&app, "/api/image/deadbeef").await.status, StatusCode::NOT_FOUND);
        assert_eq!(post(&app, "/api/session", json!({ "mode": "afc" })).await.status, StatusCode::BAD_REQUEST);
        assert_eq!(post(&app, "/api/session", json!({ "rater_id": "x", "mode": "stars" })).await.status, StatusCode::BAD_REQUEST);
        assert_eq!(post(&app, "/api/session", json!({ "rater_id": " ", "mode": "afc" })).await.status, StatusCode::BAD_REQUEST);
        let sid = post(&app, "/api/session", json!({ "rater_id": "x", "mode": "afc" })).await.json()["session_id"]
            .as_str()
            .unwrap()
            .to_string();
        let url = format!("/api/session/{sid}/judgment");
        for bad in [
            json!({ "trial_id": "t00000", "payload": { "choice": 2 } }),
            json!({ "trial_id": "t00000", "payload": { "stars": 3 } }),
            json!({ "trial_id": "t00099", "payload": { "choice": 0 } }),
            json!({ "trial_id": "t00000" }),
        ] {
            assert_eq!(post(&app, &url, bad).await.status, StatusCode::BAD_REQUEST);
        }
        let ok = json!({ "trial_id": "t00000", "payload": { "choice": 1 } });
        assert_eq!(post(&app, &url, ok.clone()).await.status, StatusCode::OK);
        let dup = post(&app, &url, ok).await;
        assert_eq!(dup.status, StatusCode::CONFLICT);
        assert!(dup.json()["error"].is_string());
    });
}

#[test]
fn session_order_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let pool = write_afc_trials(dir.path(), 12);
    let app = router(Study::open(pool, dir.path(), StudyMode::Afc, dir.path().join("db.jsonl")).unwrap());
    rt().block_on(async {
        let mut firsts = Vec::new();
        for (rater, seed) in [("a", 5), ("b", 5), ("c", 6)] {
            let sid = post(&app, "/api/session", json!({ "rater_id": rater, "mode": "afc", "seed": seed })).await.json()["session_id"]
                .as_str()
                .unwrap()
                .to_string();
            firsts.push(get(&app, &format!("/api/session/{sid}/next")).await.json()["trial_id"].clone());
        }
        assert_eq!(firsts[0], firsts[1]);
        assert_ne!(firsts[0], firsts[2]);
    });
}

#[test]
fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let pool = write_afc_trials(dir.path(), 4);
    let db = dir.path().join("db.jsonl");
    let sid = {
        let mut s = Study::open(pool.clone(), dir.path(), StudyMode::Afc, &db).unwrap();
        let sid = s.create_session("kim", StudyMode::Afc, Some(1)).unwrap();
        s.record_judgment(&sid, "t00002", json!({ "choice": 0 })).unwrap();
        sid
    };
    let mut s = Study::open(pool, dir.path(), StudyMode::Afc, &db).unwrap();
    assert_eq!(s.progress(&sid).unwrap().judged, 1);
    assert!(s.record_judgment(&sid, "t00002", json!({ "choice": 1 })).is_err());
    assert_eq!(read_sessions(&db).unwrap().len(), 1);
}

#[test]
fn three_raters_pool_to_hand_counted_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_scripted_study(dir.path(), 3, 20).unwrap();
    assert_eq!(report.judgments, 60);
    assert!(report.lost_on_restart <= 1);
    assert_eq!(report.duplicate_status, StatusCode::CONFLICT);
    assert!(report.pooled_matches);
}

#[test]
fn pooled_trials_carry_human_p() {
    let dir = tempfile::tempdir().unwrap();
    let pool = write_afc_trials(dir.path(), 2);
    let db = dir.path().join("db.jsonl");
    let mut s = Study::open(pool.clone(), dir.path(), StudyMode::Afc, &db).unwrap();
    for (rater, choice) in [("a", 1), ("b", 1), ("c", 0), ("d", 1)] {
        let sid = s.create_session(rater, StudyMode::Afc, None).unwrap();
        s.record_judgment(&sid, "t00001", json!({ "choice": choice })).unwrap();
    }
    let trials = pooled_trials(&pool, &read_judgments(&db).unwrap());
    assert_eq!(trials.len(), 1);
    assert_eq!(trials[0].p, 0.75);
    assert_eq!(trials[0].x1, pool[1].x1.clone().unwrap());
}

#[test]
fn star_ratings_become_rating_records() {
    let dir = tempfile::tempdir().unwrap();
    Image::filled(1, 4, 4, 0.3).save(dir.path().join("real.png")).unwrap();
    Image::filled(1, 4, 4, 0.6).save(dir.path().join("fake.png")).unwrap();
    let trial = |r: &str, kind| StudyTrial {
        reference: r.into(),
        x0: None,
        x1: None,
        p: None,
        category: None,
        kind: Some(kind),
        set_id: Some("set2".into()),
    };
    use perceptra::eval::RatingKind;
    let pool = vec![trial("real.png", RatingKind::Real), trial("fake.png", RatingKind::Synthetic)];
    let db = dir.path().join("db.jsonl");
    let mut s = Study::open(pool.clone(), dir.path(), StudyMode::Stars, &db).unwrap();
    let sid = s.create_session("lee", StudyMode::Stars, Some(0)).unwrap();
    assert!(s.record_judgment(&sid, "t00000", json!({ "stars": 7 })).is_err());
    s.record_judgment(&sid, "t00000", json!({ "stars": 6 })).unwrap();
    s.record_judgment(&sid, "t00001", json!({ "stars": 2 })).unwrap();
    let recs = rating_records(&pool, &read_judgments(&db).unwrap());
    assert_eq!(recs.len(), 2);
    assert_eq!((recs[0].kind, recs[0].stars, recs[0].set_id.as_str()), (RatingKind::Real, 6, "set2"));
    assert_eq!((recs[1].kind, recs[1].stars), (RatingKind::Synthetic, 2));
}
