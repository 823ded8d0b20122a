pub mod env;
pub mod evalkit;
pub mod qnet;
pub mod replay;
pub mod tensor;
pub mod trainer;
