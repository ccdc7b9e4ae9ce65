//! Attention capture, the windowed locality statistic, degeneracy checks
//! and the query/key distance bound.

pub mod bound;
pub mod degeneracy;
pub mod locality;

pub use bound::{distance_bound_check, BoundCheck};
pub use degeneracy::{verify_degeneracy, DegeneracyCheck, DegeneracyReport};
pub use locality::{capture_attention, locality_statistic, AttnRecord, LocalityReport, SublayerSlot};
