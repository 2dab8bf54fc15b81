//! Uniform interface over FaaS platforms and their datastores.
//!
//! The runtime only ever talks to these traits. The simulator in
//! [`crate::sim`] implements them; real provider adapters would too.
//!
//! Conditional creates are first-writer-wins. `append_and_get_list` has set
//! semantics: names already present are not appended again, so a retried
//! append is idempotent and list positions never move.

#![allow(async_fn_in_trait)]

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::envelope::Envelope;

/// Largest value a table store accepts; bigger values go to object stores.
pub const TABLE_ITEM_LIMIT: usize = 400_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsKind {
    Table,
    Object,
}

impl DsKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DsKind::Table => "table",
            DsKind::Object => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DsSpec {
    pub platform_id: String,
    pub kind: DsKind,
    /// Opaque; only checked for presence.
    #[serde(default)]
    pub credentials: String,
}

impl DsSpec {
    pub fn new(platform_id: impl Into<String>, kind: DsKind) -> Self {
        Self {
            platform_id: platform_id.into(),
            kind,
            credentials: "provisioned".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FaasSpec {
    pub platform_id: String,
    #[serde(default)]
    pub credentials: String,
}

impl FaasSpec {
    pub fn new(platform_id: impl Into<String>) -> Self {
        Self {
            platform_id: platform_id.into(),
            credentials: "provisioned".into(),
        }
    }
}

/// Returned once the platform has durably queued an asynchronous request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AcceptToken {
    pub request_id: String,
    pub platform_id: String,
}

/// Bitmap item. `completed_by` is the index whose update turned the bitmap
/// all-true; it is set exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BitmapState {
    pub bits: Vec<bool>,
    pub completed_by: Option<usize>,
}

impl BitmapState {
    pub fn new(size: usize) -> Self {
        Self {
            bits: vec![false; size],
            completed_by: None,
        }
    }

    pub fn all_set(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "type", content = "value")]
pub enum StoredValue {
    Item(Vec<u8>),
    List(Vec<String>),
    Bitmap(BitmapState),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ShimError {
    #[error("platform `{0}` is unavailable")]
    PlatformUnavailable(String),
    #[error("value of {size} bytes exceeds the table item limit of {limit} bytes")]
    ValueTooLarge { size: usize, limit: usize },
    #[error("payload of {size} bytes exceeds the platform limit of {limit} bytes")]
    PayloadTooLarge { size: u64, limit: u64 },
    #[error("function `{function}` is not deployed on `{platform}`")]
    UnknownFunction { function: String, platform: String },
    #[error("no invocation list at `{0}`")]
    MissingList(String),
    #[error("no bitmap at `{0}`")]
    MissingBitmap(String),
    #[error("bitmap index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("key `{0}` holds a value of another type")]
    WrongType(String),
    #[error("`{0}` store is not provided by this platform")]
    NoSuchStore(String),
    #[error("missing credentials for `{0}`")]
    MissingCredentials(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl ShimError {
    /// Errors that send an invocation down the failover path.
    pub fn triggers_failover(&self) -> bool {
        matches!(
            self,
            ShimError::PlatformUnavailable(_) | ShimError::UnknownFunction { .. }
        )
    }
}

pub trait DataStore {
    fn spec(&self) -> &DsSpec;

    /// Create-if-absent. `true` iff this call created the item.
    async fn store_output_data(&self, key: &str, data: &[u8]) -> Result<bool, ShimError>;

    /// Strongly consistent read.
    async fn get_value(&self, key: &str) -> Result<Option<StoredValue>, ShimError>;

    async fn create_invocation_list(&self, key: &str) -> Result<bool, ShimError>;

    /// Atomically appends the names not yet present and returns the list.
    async fn append_and_get_list(&self, key: &str, names: &[String]) -> Result<Vec<String>, ShimError>;

    async fn create_bitmap(&self, size: usize, key: &str) -> Result<bool, ShimError>;

    /// Atomically sets one bit and returns the post-update bitmap.
    async fn update_bitmap(&self, index: usize, key: &str) -> Result<BitmapState, ShimError>;

    /// Keys with the given prefix, sorted. Used by garbage collection.
    async fn list_keys(&self, prefix: &str) -> Result<Vec<String>, ShimError>;

    async fn delete(&self, key: &str) -> Result<bool, ShimError>;
}

pub trait FaasClient {
    fn spec(&self) -> &FaasSpec;

    /// Request size limit of the platform behind this handle.
    fn payload_limit(&self) -> u64;

    async fn async_invoke(&self, function: &str, payload: &Envelope) -> Result<AcceptToken, ShimError>;
}

pub trait Backend {
    type Ds: DataStore;
    type Faas: FaasClient;

    async fn ds_create(&self, spec: &DsSpec) -> Result<Self::Ds, ShimError>;

    async fn faas_create(&self, spec: &FaasSpec) -> Result<Self::Faas, ShimError>;
}
