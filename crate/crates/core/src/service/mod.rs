//! Session-scoped planning for an external training loop.
//!
//! Each session owns a kernel, a belief and an append-only audit log. A client
//! alternates `plan` (allocation for a batch of prompt ids) and `observe`
//! (rewards for that batch). Sessions can be snapshotted to a checksummed JSON
//! blob and restored; restoring replays the audit log and refuses blobs whose
//! recorded state disagrees with it.
//!
//! The HTTP layer (feature `server`) maps [`ErrorCode`](crate::ErrorCode)s to
//! statuses and returns `{"error": {"code", "message"}}` bodies.

mod config;
#[cfg(feature = "server")]
mod http;
mod session;

pub use config::{ServiceConfig, DEFAULT_BIND, DEFAULT_MAX_BODY_BYTES};
#[cfg(feature = "server")]
pub use http::{router, serve, status_for, SNAPSHOT_PATH_HEADER};
pub use session::{
    parse_request, replay, AuditEvent, BeliefsResponse, CreateSessionRequest, Health, KernelInfo,
    ObserveRequest, ObserveResponse, PendingPlan, PlanRequest, PlanResponse, PromptPrediction,
    ReplayInputs, ReplayOutcome, RewardRecord, SessionConfig, SessionCreated, SessionManager,
    SnapshotBlob, SnapshotOutput, SNAPSHOT_FORMAT, SNAPSHOT_VERSION,
};
