//! Batched automatic differentiation.
//!
//! [`Graph`] records batched array operations for reverse-mode gradients with
//! respect to network parameters. Derivatives with respect to state inputs
//! are carried forward as [`Jet`]s whose coefficients are themselves graph
//! nodes, so losses built from input derivatives can still be differentiated
//! with respect to parameters.

mod derivatives;
mod graph;
pub mod jet;

pub use derivatives::{
    build_derivative_map, input_jets, DerivativeEntry, DerivativeError, DerivativeKeys, DerivativeMap, JetFunction,
};
pub use graph::{pow, sigmoid, softplus, BatchedValue, CustomOp, Func, Gradients, Graph};
pub use jet::{Jet, JetBasis, JetFunc};
