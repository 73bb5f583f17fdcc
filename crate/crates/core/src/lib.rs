pub mod arena;
pub mod autograd;
pub mod encoding;
pub mod models;
pub mod pool;
pub mod rules;
pub mod records;
pub mod rl;
pub mod search;
pub mod sl;
