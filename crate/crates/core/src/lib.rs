//! Areal disease mapping toolkit.
//!
//! The pipeline runs from polygons to posterior relative risks:
//!
//! * [`geounits`]: GeoJSON units, queen contiguity, zero-case merging;
//! * [`cohort`]: line-list validation, stratum rates and indirectly
//!   standardized expected counts;
//! * [`covariates`]: transforms, z-scoring, correlation PCA and Kaiser
//!   screening;
//! * [`bym`]: the Poisson BYM2 model (scaled ICAR, PC priors, densities,
//!   simulation);
//! * [`inference`]: grid-based Laplace fitting with an MCMC cross-check;
//! * [`selection`]: DIC and bivariate covariate screening;
//! * [`mapping`]: quantile choropleths in SVG and GeoJSON output.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bym;
pub mod cohort;
pub mod covariates;
pub mod geounits;
pub mod inference;
pub mod mapping;
pub mod selection;
pub mod sparse;
pub(crate) mod stats;
