use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use reader_bench::design::{Arm, PatientRecord, Schedule};
use reader_bench::grading::{audit_manual_payload, EventLog, GradingService, ManualClock};
use reader_bench::predictor::{precompute_suggestions, SimulatedPredictor, SimulatedPredictorSpec, SuggestionCache};
use reader_bench::severity::SeverityRuleTable;
use reader_bench::simulation::{design_study, synthetic_manifest, SimulationConfig};
use reader_bench_cli::server::router;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Study {
    app: Router,
    clock: Arc<ManualClock>,
    schedule: Schedule,
    service: Arc<GradingService>,
}

fn design(patients_per_level: usize, clinicians: usize) -> (Vec<PatientRecord>, Schedule) {
    let rules = SeverityRuleTable::default();
    let config = SimulationConfig {
        patients_per_level,
        clinicians,
        missing_time_clinicians: 0,
        ..SimulationConfig::default()
    };
    let manifest = synthetic_manifest(patients_per_level, 11, &rules);
    design_study(&manifest, &config).unwrap()
}

fn study_with(patients_per_level: usize, clinicians: usize, drop_suggestions: bool) -> Study {
    let rules = SeverityRuleTable::default();
    let (cohort, schedule) = design(patients_per_level, clinicians);
    let ai = SimulatedPredictor::new(SimulatedPredictorSpec::calibrated_ai(3)).unwrap();
    let suggestions = if drop_suggestions {
        SuggestionCache::default()
    } else {
        precompute_suggestions(&ai, &schedule, &cohort, &rules)
    };
    let clock = Arc::new(ManualClock::at_epoch());
    let service = Arc::new(
        GradingService::new(
            schedule.clone(),
            cohort,
            rules,
            suggestions,
            EventLog::in_memory(),
            clock.clone(),
        )
        .unwrap(),
    );
    Study {
        app: router(service.clone()),
        clock,
        schedule,
        service,
    }
}

fn study() -> Study {
    study_with(2, 2, false)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, text) = call(app, method, uri, body).await;
    (status, serde_json::from_str(&text).unwrap_or(Value::Null))
}

async fn start(app: &Router, clinician: &str, round: u8) -> String {
    let (status, session) = json_call(
        app,
        "POST",
        "/sessions",
        Some(json!({"clinician_id": clinician, "round_no": round})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{session}");
    assert_eq!(session["position"], 0);
    session["session_id"].as_str().unwrap().to_string()
}

fn grades() -> Value {
    json!({
        "left": {"drusen": 2, "pigment": 1, "late_amd": 0},
        "right": {"drusen": 1, "pigment": 0, "late_amd": 0}
    })
}

#[tokio::test]
async fn session_lifecycle_and_errors() {
    let s = study();
    let id = start(&s.app, "C01", 1).await;

    let (status, body) = json_call(&s.app, "POST", "/sessions", Some(json!({"clinician_id": "C01", "round_no": 1}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "conflict");

    let (status, body) = json_call(&s.app, "POST", "/sessions", Some(json!({"clinician_id": "C99", "round_no": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");

    let (status, _) = call(&s.app, "GET", "/sessions/nope/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&s.app, "POST", "/sessions", Some(json!({"clinician": "C01"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");

    let (_, case) = json_call(&s.app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(case["status"], "case");
    let alias = case["patient_alias"].as_str().unwrap().to_string();

    let (status, body) = json_call(
        &s.app,
        "POST",
        &format!("/sessions/{id}/submit"),
        Some(json!({"patient_alias": "WRONG", "grades": grades()})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "out_of_order");

    let bad = json!({
        "left": {"drusen": 3, "pigment": 0, "late_amd": 0},
        "right": {"drusen": 0, "pigment": 0, "late_amd": 0}
    });
    let (status, body) = json_call(
        &s.app,
        "POST",
        &format!("/sessions/{id}/submit"),
        Some(json!({"patient_alias": alias, "grades": bad})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    assert_eq!(body["error"], "validation");
    assert!(s.service.log().is_empty());

    s.clock.advance(12.0);
    let (status, event) = json_call(
        &s.app,
        "POST",
        &format!("/sessions/{id}/submit"),
        Some(json!({"patient_alias": alias, "grades": grades(), "client_elapsed_seconds": 11.5})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(event["elapsed_seconds"], 12.0);
    assert_eq!(event["client_elapsed_seconds"], 11.5);
    assert_eq!(event["derived_severity"], 2);
    assert_eq!(event["ai_suggestion_shown"], event["arm"] == "ManualPlusAI");

    // The graded case cannot be resubmitted.
    let (status, _) = call(
        &s.app,
        "POST",
        &format!("/sessions/{id}/submit"),
        Some(json!({"patient_alias": alias, "grades": grades()})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(s.service.log().len(), 1);
}

#[tokio::test]
async fn full_round_over_http_is_blinded_and_counted() {
    let s = study_with(40, 2, false);
    let id = start(&s.app, "C02", 1).await;
    let mut manual = 0;
    for pos in 0..120 {
        let (status, text) = call(&s.app, "GET", &format!("/sessions/{id}/next"), None).await;
        assert_eq!(status, StatusCode::OK);
        let case: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(case["position"], pos);
        assert_eq!(case["total"], 120);
        if case["arm"] == "Manual" {
            manual += 1;
            assert!(audit_manual_payload(&case).is_empty(), "{text}");
            assert!(!text.contains("suggestion"));
        } else {
            let sug = &case["ai_suggestion"];
            assert!(sug["left"]["drusen"].is_u64() && sug["right"]["late_amd"].is_u64());
            assert!(sug["severity"].is_u64());
        }
        s.clock.advance(5.0);
        let (status, _) = call(
            &s.app,
            "POST",
            &format!("/sessions/{id}/submit"),
            Some(json!({"patient_alias": case["patient_alias"], "grades": grades()})),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED);
    }
    assert_eq!(manual, 60);
    let (_, end) = json_call(&s.app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(end["status"], "end_of_round");
    assert_eq!(end["completed"], 120);

    let (status, progress) = json_call(&s.app, "GET", "/admin/progress", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(progress["washout_applied"], true);
    assert_eq!(progress["events"], 120);
    let rows = progress["rounds"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * 4);
    let done = rows.iter().find(|r| r["clinician_id"] == "C02" && r["round_no"] == 1).unwrap();
    assert_eq!((done["completed"].as_u64(), done["total"].as_u64()), (Some(120), Some(120)));
    assert!(rows.iter().filter(|r| r != &done).all(|r| r["completed"] == 0));
    // One complete round out of four: not yet eligible for the time model.
    assert_eq!(progress["timing"][0]["complete_rounds"], json!([1]));
    assert_eq!(progress["timing"][0]["eligible"], false);
}

#[tokio::test]
async fn events_endpoint_streams_filtered_json_lines() {
    let s = study();
    for c in ["C01", "C02"] {
        let id = start(&s.app, c, 1).await;
        loop {
            let (_, case) = json_call(&s.app, "GET", &format!("/sessions/{id}/next"), None).await;
            if case["status"] != "case" {
                break;
            }
            s.clock.advance(3.0);
            call(
                &s.app,
                "POST",
                &format!("/sessions/{id}/submit"),
                Some(json!({"patient_alias": case["patient_alias"], "grades": grades()})),
            )
            .await;
        }
    }
    let per_round = s.schedule.round(1).unwrap().for_clinician("C01").unwrap().case_count();

    let (status, all) = call(&s.app, "GET", "/events", None).await;
    assert_eq!(status, StatusCode::OK);
    let lines: Vec<Value> = all.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * per_round);
    assert!(lines[..per_round].iter().all(|e| e["clinician_id"] == "C01"));

    let (_, some) = call(&s.app, "GET", "/events?clinician=C02&round=1&arm=Manual", None).await;
    let filtered: Vec<Value> = some.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(filtered.len(), per_round / 2);
    assert!(filtered.iter().all(|e| e["clinician_id"] == "C02" && e["arm"] == "Manual"));
    let expected = [
        "arm",
        "ai_suggestion_shown",
        "clinician_id",
        "derived_severity",
        "elapsed_seconds",
        "patient_alias",
        "presented_at",
        "round_no",
        "submitted",
        "submitted_at",
    ];
    let keys: Vec<&String> = filtered[0].as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), expected.len());
    assert!(expected.iter().all(|k| filtered[0].get(*k).is_some()));
    // Only present when the client reported a duration.
    assert!(filtered[0].get("client_elapsed_seconds").is_none());

    let (_, none) = call(&s.app, "GET", "/events?round=4", None).await;
    assert!(none.is_empty());
    let (status, _) = call(&s.app, "GET", "/events?arm=Robot", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn abandoned_case_keeps_grade_but_loses_time() {
    let s = study();
    let id = start(&s.app, "C01", 2).await;
    let (_, case) = json_call(&s.app, "GET", &format!("/sessions/{id}/next"), None).await;
    let (status, _) = call(&s.app, "POST", &format!("/sessions/{id}/abandon"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    s.clock.advance(30.0);
    let (_, again) = json_call(&s.app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(again["patient_alias"], case["patient_alias"]);
    let (status, event) = json_call(
        &s.app,
        "POST",
        &format!("/sessions/{id}/submit"),
        Some(json!({"patient_alias": case["patient_alias"], "grades": grades()})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert!(event["elapsed_seconds"].is_null());
}

#[tokio::test]
async fn assisted_case_without_suggestion_is_deferred_not_downgraded() {
    let s = study_with(2, 2, true);
    let id = start(&s.app, "C01", 1).await;
    let plan = s.schedule.round(1).unwrap().for_clinician("C01").unwrap();
    let arms: Vec<Arm> = plan.cases().map(|(_, arm, _)| arm).collect();
    for arm in arms {
        let (status, body) = json_call(&s.app, "GET", &format!("/sessions/{id}/next"), None).await;
        if arm == Arm::ManualPlusAI {
            assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
            assert_eq!(body["error"], "predictor_unavailable");
            return;
        }
        assert_eq!(body["arm"], "Manual");
        call(
            &s.app,
            "POST",
            &format!("/sessions/{id}/submit"),
            Some(json!({"patient_alias": body["patient_alias"], "grades": grades()})),
        )
        .await;
    }
    panic!("round 1 has no Manual+AI case");
}
