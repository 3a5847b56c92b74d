pub mod error;
pub mod numeric;
pub mod quadrature;
pub mod basis;
pub mod data;
pub mod functionals;
pub mod gram;
pub mod ustat;
pub mod nuisance;
pub mod estimator;
pub mod sim;
