//! Task-agnostic adversarial attacks on a small attention-based vision
//! backbone, plus everything needed to measure them end to end: a reverse-mode
//! f64 tensor engine, a desk-scale vision transformer, synthetic datasets and
//! task heads, metric protocols, and bit-exact on-disk formats.

pub mod attack;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod opt;
pub mod tensor;
pub mod vit;
pub mod viz;
