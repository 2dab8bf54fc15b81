//! The event envelope passed between functions.
//!
//! Wire form (JSON, version `v = 1`):
//!
//! ```json
//! {
//!   "v": 1,
//!   "control": {"workflowId": "...", "step": 2, "branch": [0], "session": "...", "invokeMode": "Sequence"},
//!   "data": {"mode": "direct", "payload": "<base64>"},
//!   "meta": {"caller": "<workflowId>/A_1", "iteration": 0}
//! }
//! ```
//!
//! `data` is either `{"mode": "direct", "payload": ...}` or
//! `{"mode": "indirect", "refs": [{"key": ..., "ds": {"platformId": ..., "kind": ...}}]}`.
//! `branch` lists levels oldest first.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ir::InvokeMode;
use crate::naming::BranchStack;
use crate::shim::DsSpec;

pub const ENVELOPE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Control {
    pub workflow_id: String,
    pub step: u32,
    pub branch: BranchStack,
    pub session: String,
    pub invoke_mode: InvokeMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DataRef {
    pub key: String,
    pub ds: DsSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Data {
    Direct {
        #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
        payload: Vec<u8>,
    },
    Indirect {
        refs: Vec<DataRef>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Meta {
    pub caller: Option<String>,
    #[serde(default)]
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub control: Control,
    pub data: Data,
    pub meta: Meta,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("unsupported envelope version {0}")]
    Version(u32),
}

impl Envelope {
    pub fn new(control: Control, data: Data, meta: Meta) -> Self {
        Self {
            v: ENVELOPE_VERSION,
            control,
            data,
            meta,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvelopeError> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| EnvelopeError::Malformed(e.to_string()))?;
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if self.v != ENVELOPE_VERSION {
            return Err(EnvelopeError::Version(self.v));
        }
        if self.control.workflow_id.is_empty() || self.control.workflow_id.contains('/') {
            return Err(EnvelopeError::Malformed("bad workflowId".into()));
        }
        if let Data::Indirect { refs } = &self.data {
            if refs.is_empty() || refs.iter().any(|r| r.key.is_empty()) {
                return Err(EnvelopeError::Malformed("indirect data without refs".into()));
            }
        }
        Ok(())
    }

    /// Size checked against platform payload limits: raw payload bytes plus
    /// the serialized envelope without its payload.
    pub fn wire_size(&self) -> u64 {
        let payload = match &self.data {
            Data::Direct { payload } => payload.len() as u64,
            Data::Indirect { .. } => 0,
        };
        let mut shell = self.clone();
        if let Data::Direct { payload } = &mut shell.data {
            payload.clear();
        }
        payload + shell.to_json().len() as u64
    }
}

fn ser_b64<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&B64.encode(bytes))
}

fn de_b64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let s = String::deserialize(d)?;
    B64.decode(s).map_err(serde::de::Error::custom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shim::DsKind;

    fn sample(data: Data) -> Envelope {
        Envelope::new(
            Control {
                workflow_id: "w1".into(),
                step: 3,
                branch: BranchStack::from_levels(vec![1, 0]),
                session: "s".into(),
                invoke_mode: InvokeMode::Parallel,
            },
            data,
            Meta {
                caller: Some("w1/B_2-bindex-1".into()),
                iteration: 0,
            },
        )
    }

    #[test]
    fn json_round_trip() {
        let direct = sample(Data::Direct {
            payload: b"hello".to_vec(),
        });
        assert_eq!(Envelope::from_json(&direct.to_json()).unwrap(), direct);
        let indirect = sample(Data::Indirect {
            refs: vec![DataRef {
                key: "w1/A_0-output".into(),
                ds: DsSpec::new("p1", DsKind::Object),
            }],
        });
        let text = indirect.to_json();
        assert!(text.contains("\"mode\":\"indirect\""));
        assert_eq!(Envelope::from_json(&text).unwrap(), indirect);
    }

    #[test]
    fn rejects_bad_envelopes() {
        assert!(Envelope::from_json("{}").is_err());
        let mut e = sample(Data::Indirect { refs: vec![] });
        assert!(e.validate().is_err());
        e.data = Data::Direct { payload: vec![] };
        e.v = 7;
        assert_eq!(Envelope::from_json(&e.to_json()), Err(EnvelopeError::Version(7)));
    }

    #[test]
    fn wire_size_counts_raw_payload() {
        let small = sample(Data::Direct { payload: vec![] });
        let big = sample(Data::Direct {
            payload: vec![7u8; 1024],
        });
        assert_eq!(big.wire_size() - small.wire_size(), 1024);
        assert!(small.wire_size() < 4096);
    }
}
