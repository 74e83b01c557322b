//! Functional emulator of the Northcape capability architecture.

pub mod allocator;
pub mod cmt;
pub mod loader;
pub mod machine;
pub mod memory;
pub mod ntlb;
pub mod ops;
pub mod resolver;
pub mod token;

pub use cmt::{Cmt, CmtEntry, CmtError, EntryKind, Permissions, Restriction};
pub use resolver::{AccessContext, AccessKind, Fault, Regime};
pub use token::{CapId, CapToken, OffsetType, TokenError};
