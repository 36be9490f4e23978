//! Wire messages exchanged with scorer workers.
//!
//! Every message is one JSON object per line. A worker first writes a
//! [`Handshake`], then answers each [`Request`] with exactly one
//! [`Response`] carrying the same `id`. Unknown fields are ignored.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Reward,
    Generate,
    Embed,
    Classify,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::Reward => "reward",
            Op::Generate => "generate",
            Op::Embed => "embed",
            Op::Classify => "classify",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub capabilities: Vec<Op>,
    pub batch_limit: usize,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: String,
    pub op: Op,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub result: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Response {
    pub fn success(id: impl Into<String>, result: Value) -> Self {
        Response {
            id: id.into(),
            ok: true,
            result,
            error: None,
        }
    }

    pub fn failure(id: impl Into<String>, code: &str, message: impl Into<String>) -> Self {
        Response {
            id: id.into(),
            ok: false,
            result: Value::Null,
            error: Some(WireError {
                code: code.to_string(),
                message: message.into(),
            }),
        }
    }
}

/// Which answer a score or generation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Answer,
    VisionAblated,
    Reference,
    Candidate(usize),
    Chosen,
    Rejected,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Answer => f.write_str("answer"),
            Variant::VisionAblated => f.write_str("vision_ablated"),
            Variant::Reference => f.write_str("reference"),
            Variant::Candidate(k) => write!(f, "candidate:{k}"),
            Variant::Chosen => f.write_str("chosen"),
            Variant::Rejected => f.write_str("rejected"),
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "answer" => Variant::Answer,
            "vision_ablated" => Variant::VisionAblated,
            "reference" => Variant::Reference,
            "chosen" => Variant::Chosen,
            "rejected" => Variant::Rejected,
            other => {
                let k = other
                    .strip_prefix("candidate:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| format!("unknown variant `{other}`"))?;
                Variant::Candidate(k)
            }
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `mode` field of a generate payload.
pub mod mode {
    pub const VISION_ABLATED: &str = "vision_ablated";
    pub const REFERENCE: &str = "reference";
    pub const CANDIDATE: &str = "candidate";
    pub const SYNTHESIS: &str = "synthesis";
}

#[derive(Debug, Clone, Deserialize)]
pub struct RewardPayload {
    pub variant: Variant,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub media: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GeneratePayload {
    pub mode: String,
    pub question: String,
    #[serde(default)]
    pub media: Vec<String>,
    #[serde(default)]
    pub cues: Vec<String>,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub temperature: f64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
pub struct EmbedPayload {
    pub question: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub media: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ClassifyPayload {
    pub question: String,
}

/// Checks that a result has the shape its op requires. Used on fresh
/// responses and on cache hits alike.
pub fn validate_result(op: Op, payload: &Value, result: &Value) -> Result<(), String> {
    match op {
        Op::Reward => match result.get("score").and_then(Value::as_f64) {
            Some(s) if s.is_finite() => Ok(()),
            Some(_) => Err("non-finite score".into()),
            None => Err("missing numeric `score`".into()),
        },
        Op::Generate => {
            let count = payload.get("count").and_then(Value::as_u64).unwrap_or(1) as usize;
            let synthesis = payload.get("mode").and_then(Value::as_str) == Some(mode::SYNTHESIS);
            if synthesis {
                let pairs = result
                    .get("pairs")
                    .and_then(Value::as_array)
                    .ok_or("missing `pairs` array")?;
                if pairs.len() != count {
                    return Err(format!("expected {count} pairs, got {}", pairs.len()));
                }
                for p in pairs {
                    let q = p.get("question").and_then(Value::as_str).unwrap_or("");
                    let a = p.get("answer").and_then(Value::as_str).unwrap_or("");
                    if q.is_empty() || a.is_empty() {
                        return Err("synthesized pair with empty question or answer".into());
                    }
                }
            } else {
                let texts = result
                    .get("texts")
                    .and_then(Value::as_array)
                    .ok_or("missing `texts` array")?;
                if texts.len() != count {
                    return Err(format!("expected {count} texts, got {}", texts.len()));
                }
                if texts.iter().any(|t| t.as_str().is_none_or(str::is_empty)) {
                    return Err("empty generated text".into());
                }
            }
            Ok(())
        }
        Op::Embed => {
            let v = result
                .get("vector")
                .and_then(Value::as_array)
                .ok_or("missing `vector` array")?;
            if v.is_empty() {
                return Err("empty vector".into());
            }
            let mut norm = 0.0;
            for x in v {
                let x = x
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or("non-finite vector component")?;
                norm += x * x;
            }
            if norm == 0.0 {
                return Err("zero vector cannot be normalized".into());
            }
            Ok(())
        }
        Op::Classify => {
            let levels = result
                .get("levels")
                .and_then(Value::as_array)
                .ok_or("missing `levels` array")?;
            let leaf_ok = levels
                .iter()
                .rev()
                .filter_map(Value::as_str)
                .any(|l| !l.is_empty());
            if leaf_ok {
                Ok(())
            } else {
                Err("empty leaf label".into())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn variant_round_trip() {
        for v in [
            Variant::Answer,
            Variant::VisionAblated,
            Variant::Reference,
            Variant::Candidate(7),
            Variant::Chosen,
            Variant::Rejected,
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("candidate:".parse::<Variant>().is_err());
    }

    #[test]
    fn response_ignores_unknown_fields() {
        let r: Response =
            serde_json::from_str(r#"{"id":"1","ok":true,"result":{"score":0.5},"extra":3}"#)
                .unwrap();
        assert!(r.ok);
        let text = serde_json::to_string(&Response::failure("2", "bad-request", "nope")).unwrap();
        assert_eq!(
            text,
            r#"{"id":"2","ok":false,"error":{"code":"bad-request","message":"nope"}}"#
        );
    }

    #[test]
    fn result_validation() {
        assert!(validate_result(Op::Reward, &json!({}), &json!({"score": 1.5})).is_ok());
        assert!(validate_result(Op::Reward, &json!({}), &json!({"score": null})).is_err());
        let p = json!({"mode": "candidate", "count": 2});
        assert!(validate_result(Op::Generate, &p, &json!({"texts": ["a", "b"]})).is_ok());
        assert!(validate_result(Op::Generate, &p, &json!({"texts": ["a"]})).is_err());
        assert!(validate_result(Op::Embed, &json!({}), &json!({"vector": [0.0, 0.0]})).is_err());
        assert!(validate_result(Op::Classify, &json!({}), &json!({"levels": ["x", ""]})).is_ok());
        assert!(validate_result(Op::Classify, &json!({}), &json!({"levels": [""]})).is_err());
    }
}
