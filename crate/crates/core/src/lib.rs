//! Simulator of speculative store-to-load dependency resolution and of the
//! physical-address leak it exposes, together with the attacks that build on
//! the leak: eviction-set search, DRAM bank co-location, contiguous-memory
//! detection and double-sided rowhammer.

pub mod config;
pub mod memmap;
pub mod mob;
pub mod noise;
pub mod spoiler;
pub mod cache;
pub mod dram;
pub mod analysis;
pub mod experiments;
