#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod action;
pub mod context;
pub mod data;
pub mod experiment;
pub mod probe;
pub mod protocol;
pub mod reward;
pub mod rng;
pub mod runtime;
pub mod train;
