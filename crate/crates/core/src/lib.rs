//! Heterogeneous syntactic-structure distillation.
//!
//! Four tree-encoder teachers (Child-Sum TreeLSTM and GCN over dependency
//! trees, N-ary TreeLSTM and GCN over constituency trees) are distilled into
//! a sequential BiLSTM student through output, feature and structure-injection
//! losses. After training the student needs only the token sequence.

pub mod distill;
pub mod encoders;
pub mod gradcheck;
pub mod models;
pub mod par;
pub mod probe;
pub mod structures;
pub mod syntax_data;
pub mod tensor;
pub mod train;

pub mod cli;

pub use tensor::{Adam, Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};
