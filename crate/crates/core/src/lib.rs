//! Network-coded multiple access: a two-user uplink where each slot is
//! decoded both as two separate packets and as their XOR, and a MAC layer
//! turns whatever subset survives into progress on erasure-coded messages.

pub mod channel;
pub mod convcode;
pub mod demod;
pub mod erasure;
pub mod galois;
pub mod phydec;
pub mod macdec;
pub mod protocol;
