pub mod autodiff;
pub mod formula;
pub mod networks;
pub mod codec;
pub mod optimizers;
pub mod framework;
pub mod problems;
