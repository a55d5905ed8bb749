//! Gate maps from (accessible, inaccessible) states to prediction heads, and
//! their construction by gradient similarity.

mod builder;
mod cluster;
mod gradient;
mod map;

pub use builder::{build_gate_map, gate_builders, GateBuilder, GateRequest, GradSim, Identity, Manual};
pub use cluster::{average_linkage, cosine_similarity, similarity_matrix};
pub use gradient::{state_gradient, state_gradients, StateGradient};
pub use map::{gate_lookup, state_label, GateMap, Provenance};
