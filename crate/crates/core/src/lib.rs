pub mod adaptrl;
pub mod harness;
pub mod numerics;
pub mod pendulum;
pub mod pipeline;
pub mod simdist;
pub mod sysid;
pub mod taskpolicy;
