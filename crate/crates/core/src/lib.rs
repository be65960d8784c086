pub mod allocate;
pub mod epidemic;
pub mod experiments;
pub mod gp;
pub mod lp;
pub mod network;
pub mod solver;
pub mod uncertainty;
