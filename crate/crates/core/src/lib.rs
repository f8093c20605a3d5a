//! Byzantine fault tolerant agreement on ML inference results.

pub mod agreement;
pub mod certificate;
pub mod client;
pub mod codec;
pub mod crypto;
pub mod distance;
pub mod domain;
pub mod inference;
pub mod merkle;
pub mod messages;
pub mod proxy;
pub mod trace;
