//! Minimal neural-network substrate: tensors, DAG computation graphs with
//! reverse-mode differentiation, losses, Adam, and a binary checkpoint
//! format.
//!
//! Everything runs on `f64` on the CPU. Graphs are built once, trained under
//! exclusive access, then frozen and shared freely for concurrent read-only
//! inference (`forward` takes `&self` and returns its cache by value).

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{he_uniform, Gradients, Graph, Node, NodeId, Op, Tape};
pub use loss::{
    accuracy, argmax, cross_entropy, softmax, softmax_backward, softmax_ce_grad, softmax_rows,
    CrossEntropy,
};
pub use optim::{adam_step, cosine_lr, AdamState};
pub use tensor::Tensor;
