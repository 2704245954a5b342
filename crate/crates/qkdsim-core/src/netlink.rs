//! Classical-channel wire protocol and the two session state machines.
//!
//! [`codec`] defines a small length-prefixed binary framing with typed
//! messages; [`session`] drives a complete key exchange over any transport
//! that can deliver whole frames, without doing IO itself: callers feed
//! received frames in and send the returned frames out. This keeps the
//! protocol logic testable in-process and identical between transports.

pub mod codec;
pub mod session;

pub use codec::{DecodeError, Frame, Message, MessageType, WireParams, HEADER_LEN, MAX_PAYLOAD};
pub use session::{
    AliceSession, BobHooks, BobSession, Phase, SessionError, SessionOutcome, SessionStats,
};
