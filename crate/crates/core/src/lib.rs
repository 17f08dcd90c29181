pub mod bench;
pub mod chunk;
pub mod discrete;
pub mod envs;
pub mod error;
pub mod executors;
pub mod flow;
pub mod math;
pub mod net;
pub mod rng;
pub mod train;

pub use chunk::{ActionChunk, TokenChunk};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/executors.md")]
    mod executors {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/discrete.md")]
    mod discrete {}
    #[doc = include_str!("../../../book/src/envs.md")]
    mod envs {}
    #[doc = include_str!("../../../book/src/config.md")]
    mod config {}
}
