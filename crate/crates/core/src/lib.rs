pub mod dsl;
pub mod experiment;
pub mod graph;
pub mod mlkit;
pub mod runtime;
pub mod schemes;
pub mod tensor;
