#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod anatomy;
pub mod assets;
pub mod capture;
pub mod geometry;
pub mod imaging;
pub mod linalg;
pub mod material;
pub mod quasistatic;
pub mod rig;
pub mod rotation;
pub mod sensitivity;
