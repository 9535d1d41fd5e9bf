//! Code listings of the guide in `book/`, compiled and run as doc-tests.
#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/maze.md")]
pub mod maze {}

#[doc = include_str!("../../../book/src/consistency.md")]
pub mod consistency {}

#[doc = include_str!("../../../book/src/building.md")]
pub mod building {}

#[doc = include_str!("../../../book/src/planning.md")]
pub mod planning {}

#[doc = include_str!("../../../book/src/cleanup.md")]
pub mod cleanup {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
