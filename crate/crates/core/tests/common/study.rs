//! In-process HTTP driver for the study service and the scripted
//! multi-rater scenario.

use std::collections::BTreeMap;
use std::path::Path;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use perceptra::imaging::Image;
use perceptra::study::{pool_afc, read_judgments, router, Study, StudyMode, StudyTrial};
use serde_json::{json, Value};
use tower::ServiceExt;

pub struct Reply {
    pub status: StatusCode,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .expect("request");
    let res = app.clone().oneshot(req).await.expect("infallible router");
    let status = res.status();
    let bytes = res.into_body().collect().await.expect("body").to_bytes().to_vec();
    Reply { status, bytes }
}

pub async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    call(app, Method::POST, uri, Some(&body.to_string())).await
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, None).await
}

/// Writes `n` 2AFC trials of small gray PNGs under `dir` and returns them.
pub fn write_afc_trials(dir: &Path, n: usize) -> Vec<StudyTrial> {
    (0..n)
        .map(|i| {
            let mut names = Vec::new();
            for (tag, v) in [("r", 0.5), ("a", 0.1 + 0.01 * i as f64), ("b", 0.9 - 0.01 * i as f64)] {
                let name = format!("{tag}{i:03}.png");
                Image::filled(1, 4, 4, v).save(dir.join(&name)).expect("write png");
                names.push(name);
            }
            StudyTrial {
                reference: names[0].clone(),
                x0: Some(names[1].clone()),
                x1: Some(names[2].clone()),
                p: None,
                category: None,
                kind: None,
                set_id: None,
            }
        })
        .collect()
}

/// A rater's deterministic choice for a trial.
pub fn scripted_choice(rater: usize, trial_id: &str) -> u64 {
    let t: usize = trial_id[1..].parse().expect("trial id");
    ((t * 7 + rater * 3) % 5 < 2) as u64
}

pub struct ScenarioReport {
    pub judgments: usize,
    pub lost_on_restart: usize,
    pub duplicate_status: StatusCode,
    pub pooled_matches: bool,
}

/// `raters` sessions over `trials` 2AFC trials. The service is dropped and
/// reopened after the middle rater's tenth judgment, with a torn half-line
/// appended to the log to mimic a crash during a write; that rater then
/// resumes the same session.
pub fn run_scripted_study(dir: &Path, raters: usize, trials: usize) -> Result<ScenarioReport, String> {
    let rt = tokio::runtime::Builder::new_current_thread().build().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let pool = write_afc_trials(dir, trials);
        let db = dir.join("judgments.jsonl");
        let open = || Study::open(pool.clone(), dir, StudyMode::Afc, &db).map(router).map_err(|e| e.to_string());
        let mut app = open()?;
        let mut hand: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let (mut lost, mut duplicate_status) = (0, StatusCode::OK);
        for rater in 0..raters {
            let reply = post(&app, "/api/session", json!({ "rater_id": format!("rater{rater}"), "mode": "afc", "seed": rater })).await;
            if reply.status != StatusCode::OK {
                return Err(format!("session create: {}", reply.status));
            }
            let sid = reply.json()["session_id"].as_str().ok_or("no session id")?.to_string();
            let mut done_here = 0;
            loop {
                let next = get(&app, &format!("/api/session/{sid}/next")).await.json();
                if next.get("done").is_some() {
                    break;
                }
                let tid = next["trial_id"].as_str().ok_or("no trial id")?.to_string();
                for img in next["images"].as_array().ok_or("no images")? {
                    let r = get(&app, img.as_str().ok_or("image url")?).await;
                    if r.status != StatusCode::OK || !r.bytes.starts_with(b"\x89PNG") {
                        return Err(format!("image {img}: {}", r.status));
                    }
                }
                let choice = scripted_choice(rater, &tid);
                let body = json!({ "trial_id": tid, "payload": { "choice": choice } });
                let r = post(&app, &format!("/api/session/{sid}/judgment"), body.clone()).await;
                if r.status != StatusCode::OK {
                    return Err(format!("judgment {tid}: {}", r.status));
                }
                let e = hand.entry(tid.clone()).or_default();
                e.0 += choice as usize;
                e.1 += 1;
                done_here += 1;
                if rater == 0 && done_here == 1 {
                    duplicate_status = post(&app, &format!("/api/session/{sid}/judgment"), body).await.status;
                }
                if rater == raters / 2 && done_here == 10 {
                    drop(app);
                    use std::io::Write;
                    let mut f = std::fs::OpenOptions::new().append(true).open(&db).map_err(|e| e.to_string())?;
                    f.write_all(br#"{"session_id":"torn","#).map_err(|e| e.to_string())?;
                    drop(f);
                    app = open()?;
                    let p = get(&app, &format!("/api/session/{sid}/progress")).await.json();
                    let judged = p["judged"].as_u64().ok_or("no progress after restart")? as usize;
                    lost = done_here - judged;
                }
            }
        }
        let records = read_judgments(&db).map_err(|e| e.to_string())?;
        let pooled = pool_afc(&records);
        let expected: BTreeMap<String, f64> = hand.iter().map(|(k, (ones, n))| (k.clone(), *ones as f64 / *n as f64)).collect();
        Ok(ScenarioReport {
            judgments: records.len(),
            lost_on_restart: lost,
            duplicate_status,
            pooled_matches: pooled == expected && pooled.len() == trials,
        })
    })
}
