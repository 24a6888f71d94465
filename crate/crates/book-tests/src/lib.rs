//! Compiles the guide's code blocks as doctests.
//!
//! Each chapter of `book/src/` is included below as a doc comment on an
//! empty module, so `cargo test` runs every fenced Rust snippet in the book.
//! A snippet that drifts out of sync with the library fails the build, and
//! the failing module name points at the offending chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/freezing.md")]
pub mod freezing {}

#[doc = include_str!("../../../book/src/similarity.md")]
pub mod similarity {}

#[doc = include_str!("../../../book/src/caching.md")]
pub mod caching {}

#[doc = include_str!("../../../book/src/distributed.md")]
pub mod distributed {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
