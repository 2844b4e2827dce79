//! Gromov-Wasserstein matching with generalized scalar slicers.
//!
//! The crate is organized around one idea: a pair of learned maps, a lifting
//! `h: R^p -> R^q` and a scalar slicer `f: R^q -> R`, pushes two point clouds
//! to the real line, where sorting induces a cheap monotone transport plan.
//! Minimizing the Gromov-Wasserstein loss of that induced plan over the maps
//! gives correspondences at a fraction of the cost of solving the quadratic
//! assignment directly.
//!
//! Modules:
//! - [`measures`]: point clouds, cost matrices, couplings and the GW losses.
//! - [`plan`]: sorting-induced monotone plans and their exact construction.
//! - [`softsort`]: differentiable relaxation of sorting and of the plan.
//! - [`autodiff`]: the minimal reverse-mode tape the relaxations train on.
//! - [`slicers`]: MLP slicer/lifting pairs with random Fourier features.
//! - [`solver`]: annealed Adam loop minimizing GW loss over slicer weights.
//! - [`baselines`]: brute force, entropic, Frank-Wolfe and sliced baselines.
//! - [`geometry`]: mesh loading, geodesics, rigid motions, correspondences.
//! - [`amortized`]: a feed-forward matcher predicting slicing scores.
//! - [`synth`]: deterministic synthetic instances used by tests and the CLI.

pub mod amortized;
pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod geometry;
pub mod measures;
pub mod mesh_io;
pub mod plan;
pub mod rng;
pub mod slicers;
pub mod softsort;
pub mod solver;
pub mod synth;
pub mod tensor;

mod hungarian;

pub use error::{GsgwError, Result};
pub use tensor::Tensor;
