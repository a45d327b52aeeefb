//! Linear operators of the penalized functional and their proximal calculus.

mod graph;
mod linear;
mod prox;

pub use graph::EpiGraph;
pub use linear::{
    d2_adjoint, d2_apply, graph_adjoint, graph_apply, graph_norm_sq, l_adjoint, l_apply, l_norm_sq_estimate,
    op_norm_bound, power_iteration, DualVariable, PowerIteration, D2_NORM_SQ_BOUND,
};
pub use prox::{prox_f, prox_f_pinned, prox_h_conj, prox_kl_scalar, prox_nonneg, prox_soft_threshold};
