//! Predictor reached over HTTP: one `POST {endpoint}/predict` per patient,
//! using the same JSON bodies as the subprocess line protocol.

use std::time::Duration;

use reader_bench::design::PatientRecord;
use reader_bench::predictor::{parse_prediction, FeaturePrediction, PredictRequest, Predictor, PredictorBinding};
use reader_bench::Error;

use crate::error::{CliError, CliResult};

pub struct HttpPredictor {
    client: reqwest::blocking::Client,
    url: String,
}

impl HttpPredictor {
    /// Must not be called from inside an async runtime.
    pub fn new(endpoint: &str, timeout: Duration) -> CliResult<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| CliError::Runtime(format!("cannot build HTTP client: {e}")))?;
        Ok(HttpPredictor {
            client,
            url: format!("{}/predict", endpoint.trim_end_matches('/')),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Predictor for HttpPredictor {
    fn predict(&self, request: &PredictRequest, _record: &PatientRecord) -> reader_bench::Result<FeaturePrediction> {
        let response = self
            .client
            .post(&self.url)
            .json(request)
            .send()
            .map_err(|e| Error::PredictorUnavailable(format!("{}: {e}", self.url)))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| Error::PredictorUnavailable(format!("{}: reading body: {e}", self.url)))?;
        if !status.is_success() {
            return Err(Error::PredictorUnavailable(format!("{} answered {status}", self.url)));
        }
        parse_prediction(&body)
    }
}

/// Any binding, including HTTP.
pub fn connect(binding: &PredictorBinding, study_seed: u64) -> CliResult<Box<dyn Predictor>> {
    match binding {
        PredictorBinding::Http { endpoint, .. } => {
            binding.validate()?;
            Ok(Box::new(HttpPredictor::new(
                endpoint,
                binding.timeout().expect("http has a timeout"),
            )?))
        }
        other => Ok(other.connect_local(study_seed)?),
    }
}
