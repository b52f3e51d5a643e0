//! Spectral Galerkin numerics for slow-fast stochastic reaction-diffusion
//! systems on an interval.
//!
//! The slow component `u` solves `du = (A u + F(u, v)) dt` and the fast
//! component `v` solves `dv = ε⁻¹ (B v + G(u, v)) dt + ε^{-1/2} dw` with
//! space-time white noise `w`. Everything here is a pure function of its
//! inputs and an explicit [`noise::NoiseStream`], so the crate builds without
//! `std`; IO, parallel scheduling and file formats live in the companion
//! crate.
//!
//! Module map:
//!
//! - [`spectral`]: analytic eigenbases, semigroups, projections, Sobolev
//!   norms, and the pseudo-spectral grid transform.
//! - [`noise`]: counter-based Gaussian streams and exact OU stepping.
//! - [`reaction`]: the reaction catalog, Nemytskii operators and the
//!   potential of the fast gradient system.
//! - [`fast`]: the fast equation with frozen slow component.
//! - [`measure`]: invariant-measure estimators, averaged drift and its
//!   derivative, mixing diagnostics.
//! - [`multiscale`]: the coupled system, the averaged equation, remainder and
//!   convergence studies.

#![no_std]

extern crate alloc;

pub mod error;
pub mod exec;
pub mod fast;
pub mod math;
pub mod measure;
pub mod multiscale;
pub mod noise;
pub mod reaction;
pub mod spectral;
pub mod stats;

pub use error::{Error, Warning};
pub use exec::{Executor, Sequential};
pub use noise::NoiseStream;
pub use reaction::{ReactionFn, ReactionSystem, Term};
pub use spectral::{Basis, BoundaryCondition, Field, Grid, OperatorSpectrum};

pub type Result<T, E = Error> = core::result::Result<T, E>;
