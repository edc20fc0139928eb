pub mod tensor;
pub mod qsim;
pub mod ssl;
pub mod hybrid;
pub mod seed;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod pipeline;
