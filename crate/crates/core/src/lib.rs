//! Tabular sepsis simulator, off-policy estimators and subgroup-aware
//! policy selection.

pub mod fps;
pub mod mdp;
pub mod ope;
pub mod model;
pub mod policy;
pub mod rng;
pub mod sepsis;
pub mod subgroup;
pub mod trajgen;
