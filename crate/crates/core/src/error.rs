use std::time::Duration;

use crate::heap::EntityKind;
use crate::runtime::Pid;

/// Errors returned by library operations.
///
/// Every library call reports failure immediately; nothing in the library
/// waits for space, acknowledgments or peers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("context violation: {0}")]
    ContextViolation(&'static str),

    #[error("library call took {elapsed:?}, bound is {bound:?}")]
    TimeBoundExceeded { elapsed: Duration, bound: Duration },

    #[error("unknown or dead process {0}")]
    UnknownPid(Pid),

    #[error("no free {0:?} slots left in the protected heap")]
    HeapExhausted(EntityKind),

    #[error("stale descriptor")]
    StaleDescriptor,

    #[error("descriptor kind mismatch: expected {expected:?}, found {found:?}")]
    KindMismatch {
        expected: EntityKind,
        found: EntityKind,
    },

    #[error("process {caller} does not own this resource")]
    OwnershipViolation { caller: Pid },

    #[error("sample reference count would drop below zero")]
    UnderflowViolation,

    #[error("mapping {requested} bytes would exceed the per-process reservation limit of {limit}")]
    ReservationLimitExceeded { requested: u64, limit: u64 },

    #[error("permission denied: regions can only be unmapped from inside the library")]
    PermissionDenied,

    #[error("region still has blocks being written")]
    BlocksInUse,

    #[error("permanent buffer has no room for {granules} granules")]
    BufferFull { granules: u64 },

    #[error("invalid block state transition: {0}")]
    InvalidStateTransition(&'static str),

    #[error("invalid block reference: {0}")]
    InvalidBlock(&'static str),

    #[error("topic name {0:?} already exists")]
    DuplicateTopicName(String),

    #[error("invalid topic name: {0}")]
    InvalidTopicName(&'static str),

    #[error("QoS does not match the topic profile")]
    QosMismatch,

    #[error("reliable window or receipt queue is full")]
    BackpressureFull,

    #[error("malformed message: {0}")]
    MalformedMessage(&'static str),

    #[error("fragment metadata conflicts with earlier fragments")]
    FragMetadataMismatch,

    #[error("datagram of {len} bytes exceeds the {mtu}-byte limit")]
    OversizedDatagram { len: usize, mtu: usize },

    #[error("statistics need at least one sample")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
