#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod data;
pub mod ebp;
pub mod error;
pub mod informative;
pub mod io;
pub mod intervals;
pub mod model;
pub mod mse;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sim;

pub use data::{AreaData, PopulationUnit, SampleDataset, UnitRecord};
pub use error::{Error, Result};
pub use model::{fit_ml, ConditionalEffect, FittedNer, NerParams};
pub use params::AreaParameter;

// Book chapters are compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/prediction.md")]
    mod prediction {}
    #[doc = include_str!("../../../book/src/mse.md")]
    mod mse {}
    #[doc = include_str!("../../../book/src/intervals.md")]
    mod intervals {}
    #[doc = include_str!("../../../book/src/informative.md")]
    mod informative {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
