pub mod config;
pub mod error;
pub mod experiments;
pub mod fluctuation;
pub mod kinetics;
pub mod langevin;
mod linalg;
pub mod morris_lecar;
pub mod pdmp;
pub mod quadrature;
pub mod rng;
pub mod spectral;
pub mod system;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/kinetics.md")]
    mod kinetics {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/fluctuations.md")]
    mod fluctuations {}
    #[doc = include_str!("../../../book/src/langevin.md")]
    mod langevin {}
    #[doc = include_str!("../../../book/src/morris_lecar.md")]
    mod morris_lecar {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
