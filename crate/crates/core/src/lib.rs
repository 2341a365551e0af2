//! Binary linear codes over the AWGN channel and their decoders: belief
//! propagation and a learned message-passing decoder built from gated node
//! updates and bidirectional selective state-space layers.

pub mod bp;
pub mod channel;
pub mod code;
pub mod numerics;
pub mod mmpd;
pub mod train;
pub mod harness;
