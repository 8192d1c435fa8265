pub mod abm;
pub mod error;
pub mod evaluation;
pub mod grad;
pub mod gradcheck;
pub mod interventions;
pub mod io;
pub mod nn;
pub mod ode;
pub mod rng;
pub mod surrogate;
pub mod trainer;
