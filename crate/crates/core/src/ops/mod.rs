//! Raw tensor kernels with hand-derived adjoints. The [`crate::graph`] tape
//! dispatches to these; they are also usable directly on values.

pub mod attention;
pub mod blur;
pub mod conv;
pub mod resample;
pub mod sampling;
