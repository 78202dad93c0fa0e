//! Line-delimited JSON messages exchanged with scorer backends.

use serde::{Deserialize, Serialize};

use super::BridgeError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMessage {
    pub id: String,
    pub op: String,
    pub text: String,
    pub mask_index: usize,
    pub top_k: usize,
    pub candidates: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeMessage {
    pub id: String,
    pub op: String,
    pub label: String,
}

/// Any request a backend may receive.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Score(ScoreMessage),
    Tokenize(TokenizeMessage),
}

impl Request {
    pub fn id(&self) -> &str {
        match self {
            Request::Score(m) => &m.id,
            Request::Tokenize(m) => &m.id,
        }
    }

    pub fn to_line(&self) -> String {
        let json = match self {
            Request::Score(m) => serde_json::to_string(m),
            Request::Tokenize(m) => serde_json::to_string(m),
        };
        json.expect("request serializes")
    }

    /// Parses a request line; the error carries the id when one is readable.
    pub fn parse(line: &str) -> Result<Request, (Option<String>, String)> {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| (None, format!("invalid JSON: {e}")))?;
        let id = value.get("id").and_then(|v| v.as_str()).map(str::to_string);
        match value.get("op").and_then(|v| v.as_str()) {
            Some("score") => serde_json::from_value(value)
                .map(Request::Score)
                .map_err(|e| (id, e.to_string())),
            Some("tokenize") => serde_json::from_value(value)
                .map(Request::Tokenize)
                .map_err(|e| (id, e.to_string())),
            Some(other) => Err((id, format!("unknown op `{other}`"))),
            None => Err((id, "missing op".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub op: String,
    pub model_id: String,
    pub mask_sentinel: String,
    pub separator: String,
}

/// Union of every response shape; which fields are set depends on the op.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retryable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<Vec<String>>,
}

impl Response {
    pub fn parse(line: &str) -> Result<Response, BridgeError> {
        serde_json::from_str(line).map_err(|e| BridgeError::Protocol {
            raw: line.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn error(id: impl Into<String>, message: impl Into<String>, retryable: bool) -> Self {
        Response {
            id: id.into(),
            error: Some(message.into()),
            retryable: Some(retryable),
            ..Default::default()
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    /// Converts an error payload into the bridge error it stands for.
    pub fn into_result(self) -> Result<Response, BridgeError> {
        match self.error {
            Some(message) => Err(BridgeError::Backend {
                id: self.id,
                message,
                retryable: self.retryable.unwrap_or(false),
            }),
            None => Ok(self),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_lines_match_the_wire_format() {
        let r = Request::Score(ScoreMessage {
            id: "q1".into(),
            op: "score".into(),
            text: "Steve Jobs was born in [MASK] .".into(),
            mask_index: 0,
            top_k: 5,
            candidates: None,
        });
        let line = r.to_line();
        assert_eq!(
            line,
            r#"{"id":"q1","op":"score","text":"Steve Jobs was born in [MASK] .","mask_index":0,"top_k":5,"candidates":null}"#
        );
        assert_eq!(Request::parse(&line).unwrap(), r);
        let t = Request::Tokenize(TokenizeMessage { id: "t".into(), op: "tokenize".into(), label: "Paris".into() });
        assert_eq!(t.to_line(), r#"{"id":"t","op":"tokenize","label":"Paris"}"#);
        assert_eq!(Request::parse(r#"{"id":"x","op":"dance"}"#).unwrap_err().0.as_deref(), Some("x"));
    }

    #[test]
    fn responses() {
        let r = Response::parse(r#"{"id":"q1","model_id":"m","predictions":[["paris",-0.1],["london",-2.3]]}"#).unwrap();
        assert_eq!(r.predictions.as_ref().unwrap()[1], ("london".to_string(), -2.3));
        let e = Response::parse(r#"{"id":"q1","error":"bad mask","retryable":false}"#).unwrap();
        assert!(matches!(e.into_result(), Err(BridgeError::Backend { retryable: false, .. })));
        assert!(matches!(Response::parse("nope"), Err(BridgeError::Protocol { .. })));
    }
}
