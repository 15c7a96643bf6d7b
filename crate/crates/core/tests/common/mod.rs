//! Independent reference implementations and shared checks for the
//! integration tests.
#![allow(dead_code, unused_imports)]

mod edit;
pub mod grad;
mod uma;

pub use edit::{enumerate_counts, oracle_counts};
pub use uma::{reference_aggregate, reference_valleys};
