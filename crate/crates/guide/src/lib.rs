//! The book's code listings, compiled and run by `cargo test --doc`.
//!
//! mdbook cannot link the workspace crates when testing, so every chapter is
//! pulled in as the docs of an empty module. One module per chapter keeps
//! failures traceable to their file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/pyramid.md")]
pub mod pyramid {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/recommendation.md")]
pub mod recommendation {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}
#[doc = include_str!("../../../book/src/formats-cli.md")]
pub mod formats_cli {}
