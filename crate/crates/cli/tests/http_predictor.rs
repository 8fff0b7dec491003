use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use reader_bench::design::{EyeImages, PatientRecord};
use reader_bench::predictor::{predict, PredictRequest, Predictor, PredictorBinding};
use reader_bench::severity::{EyeGrade, PatientGrade, SeverityRuleTable};
use reader_bench::Error;
use reader_bench_cli::http_predictor::{connect, HttpPredictor};
use serde_json::{json, Value};

type Seen = Arc<Mutex<Vec<Value>>>;

/// Stand-in model server; its behaviour is picked by the patient alias.
fn mock_model() -> (SocketAddr, Seen) {
    let seen: Seen = Arc::default();
    let log = seen.clone();
    let app = Router::new().route(
        "/predict",
        post(move |Json(body): Json<Value>| {
            let log = log.clone();
            async move {
                log.lock().unwrap().push(body.clone());
                match body["patient_alias"].as_str().unwrap_or("") {
                    "slow" => {
                        tokio::time::sleep(Duration::from_secs(3)).await;
                        (StatusCode::OK, "{}".to_string())
                    }
                    "broken" => (StatusCode::INTERNAL_SERVER_ERROR, "boom".to_string()),
                    "garbled" => (StatusCode::OK, r#"{"left": {"drusen": 7}}"#.to_string()),
                    _ => (
                        StatusCode::OK,
                        json!({
                            "left": {"drusen": 2, "pigment": 1, "late_amd": 0, "confidence": {"drusen": 0.9}},
                            "right": {"drusen": 1, "pigment": 0, "late_amd": 0},
                            "severity": 4
                        })
                        .to_string(),
                    ),
                }
            }
        }),
    );
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), seen)
}

fn record() -> PatientRecord {
    PatientRecord::new(
        "P001",
        PatientGrade::new(EyeGrade::NONE, EyeGrade::NONE),
        EyeImages {
            left: "img/P001_L.jpg".into(),
            right: "img/P001_R.jpg".into(),
        },
        &SeverityRuleTable::default(),
    )
    .unwrap()
}

fn request(alias: &str) -> PredictRequest {
    PredictRequest {
        patient_alias: alias.into(),
        images: record().images,
    }
}

#[test]
fn posts_wire_request_and_recomputes_severity() {
    let (addr, seen) = mock_model();
    let binding = PredictorBinding::Http {
        endpoint: format!("http://{addr}/"),
        timeout_seconds: 5.0,
    };
    let predictor = connect(&binding, 1).unwrap();
    let suggestion = predict(predictor.as_ref(), "K7Q2", &record(), &SeverityRuleTable::default()).unwrap();
    // The wire claimed 4; the rule table gives 2 for these grades.
    assert_eq!(suggestion.severity.value(), 2);
    assert_eq!(suggestion.left.confidence.as_ref().unwrap()["drusen"], 0.9);
    assert_eq!(
        seen.lock().unwrap()[0],
        json!({"patient_alias": "K7Q2", "images": {"left": "img/P001_L.jpg", "right": "img/P001_R.jpg"}})
    );
}

#[test]
fn failures_map_to_predictor_errors() {
    let (addr, _) = mock_model();
    let p = HttpPredictor::new(&format!("http://{addr}"), Duration::from_millis(300)).unwrap();
    assert_eq!(p.url(), format!("http://{addr}/predict"));

    match p.predict(&request("garbled"), &record()) {
        Err(Error::PredictorProtocol { raw, .. }) => assert!(raw.contains("\"drusen\": 7")),
        other => panic!("expected protocol error, got {other:?}"),
    }
    assert!(matches!(
        p.predict(&request("broken"), &record()),
        Err(Error::PredictorUnavailable(m)) if m.contains("500")
    ));
    assert!(matches!(
        p.predict(&request("slow"), &record()),
        Err(Error::PredictorUnavailable(_))
    ));
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let p = HttpPredictor::new(&format!("http://{addr}"), Duration::from_secs(1)).unwrap();
    assert!(matches!(
        p.predict(&request("x"), &record()),
        Err(Error::PredictorUnavailable(_))
    ));
}
