#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod math;
pub mod model;
pub mod state;
pub mod statespace;
