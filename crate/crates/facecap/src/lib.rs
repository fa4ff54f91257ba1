//! IO, caching, parallel drivers and the command-line front end for
//! [`facecap_core`].

pub mod cache;
pub mod cli;
pub mod formats;
pub mod gradcheck;
pub mod parallel;
pub mod pipeline;
