pub mod asymptote;
pub mod cell;
pub mod coeffexpr;
pub mod converge;
pub mod disc;
pub mod model;
pub mod spectral;
