//! The user guide, straight from `book/src`.
//!
//! mdbook cannot run a book's code blocks against the crate, so each chapter
//! is also included here as module documentation. `cargo test --doc` then
//! compiles and runs every `rust` block, which keeps the book and the crate
//! from drifting apart. One module per chapter makes a failing snippet's
//! origin legible in the test name.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensor-engine.md")]
pub mod tensor_engine {}

#[doc = include_str!("../../../book/src/domains-and-noise.md")]
pub mod domains_and_noise {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses_chapter {}

#[doc = include_str!("../../../book/src/backbones.md")]
pub mod backbones {}

#[doc = include_str!("../../../book/src/training-loop.md")]
pub mod training_loop {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
