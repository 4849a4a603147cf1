pub mod contrastive;
pub mod data;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod probe;
pub mod supervisors;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/networks.md")]
    pub struct Networks;
    #[doc = include_str!("../../../book/src/images.md")]
    pub struct Images;
    #[doc = include_str!("../../../book/src/contrastive.md")]
    pub struct Contrastive;
    #[doc = include_str!("../../../book/src/tasks.md")]
    pub struct Tasks;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/probing.md")]
    pub struct Probing;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
