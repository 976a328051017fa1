pub mod autograd;
pub mod error;
pub mod par;
pub mod seed;
pub mod tensor;
pub mod nn;
pub mod optim;
pub mod data;
pub mod instrument;
pub mod protocols;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod harness;
