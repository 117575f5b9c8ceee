//! Criterion benchmark crate; see benches/.
