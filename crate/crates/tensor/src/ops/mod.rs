pub mod activation;
pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod shape;
