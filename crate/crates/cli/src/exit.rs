//! Exit codes. Every command path ends in exactly one of these.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | a followed job ended in a state other than Succeeded |
//! | 2 | invalid input: unreadable or invalid config, bad flags, HTTP 400/422 |
//! | 3 | network: the server could not be reached or the connection failed |
//! | 4 | client error from the server: HTTP 401, 403, 404, 409 and other 4xx |
//! | 5 | server error: HTTP 5xx or a response that does not decode |

use std::fmt;

use acm_api::types::ErrorBody;
use reqwest::StatusCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    JobFailed = 1,
    Invalid = 2,
    Network = 3,
    Client = 4,
    Server = 5,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn for_status(status: StatusCode) -> Exit {
        match status.as_u16() {
            200..=299 => Exit::Ok,
            400 | 422 => Exit::Invalid,
            400..=499 => Exit::Client,
            _ => Exit::Server,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self {
            exit,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(Exit::Invalid, message)
    }

    /// Builds the error for a non-success response, keeping the server's
    /// error code, message and any violation details.
    pub fn from_response(status: StatusCode, body: &[u8]) -> Self {
        let exit = Exit::for_status(status);
        let message = match serde_json::from_slice::<ErrorBody>(body) {
            Ok(b) => {
                let mut m = format!("{} {}: {}", status.as_u16(), b.error.code, b.error.message);
                for d in &b.error.details {
                    let code = d["code"].as_str().unwrap_or("?");
                    let text = d["message"].as_str().unwrap_or_default();
                    m.push_str(&format!("\n  {code}: {text}"));
                }
                m
            }
            Err(_) => format!("{status}: {}", String::from_utf8_lossy(body).trim()),
        };
        Self { exit, message }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_status_class_maps_to_one_code() {
        assert_eq!(Exit::for_status(StatusCode::OK), Exit::Ok);
        assert_eq!(Exit::for_status(StatusCode::UNPROCESSABLE_ENTITY), Exit::Invalid);
        assert_eq!(Exit::for_status(StatusCode::BAD_REQUEST), Exit::Invalid);
        for s in [401, 403, 404, 409, 413, 429] {
            assert_eq!(Exit::for_status(StatusCode::from_u16(s).unwrap()), Exit::Client, "{s}");
        }
        for s in [500, 502, 503] {
            assert_eq!(Exit::for_status(StatusCode::from_u16(s).unwrap()), Exit::Server, "{s}");
        }
    }

    #[test]
    fn violation_details_are_listed() {
        let body = br#"{"error":{"code":"InvalidSpec","message":"invalid job spec","details":[{"code":"UnknownInstanceType","message":"task group \"w\" requests unknown instance type \"tpu\""}]}}"#;
        let e = CliError::from_response(StatusCode::UNPROCESSABLE_ENTITY, body);
        assert_eq!(e.exit, Exit::Invalid);
        assert!(e
            .message
            .contains("UnknownInstanceType: task group \"w\" requests unknown instance type \"tpu\""));
    }
}
