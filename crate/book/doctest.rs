// mdbook cannot run listings that depend on a workspace crate, so every
// chapter is pulled in as a module doc and `cargo test --doc` compiles and
// runs the listings instead. One module per chapter keeps failures traceable.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/events.md")]
pub mod events {}
#[doc = include_str!("src/synthetic.md")]
pub mod synthetic {}
#[doc = include_str!("src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("src/kernels.md")]
pub mod kernels {}
#[doc = include_str!("src/encoders.md")]
pub mod encoders {}
#[doc = include_str!("src/decoders.md")]
pub mod decoders {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
