//! Penalized and singular matrix Riccati equations for linear-quadratic
//! control with a random terminal subspace constraint.
//!
//! The crate is organised bottom-up: [`matcore`] holds symmetric-matrix and
//! PSD-cone utilities, [`coeffmodel`] the coefficient processes on a
//! recombining scenario tree, [`riccati`] the backward solvers and the
//! penalization ladder, [`closedform`] reference solutions, and [`control`]
//! the feedback strategies built from a solved equation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod closedform;
pub mod coeffmodel;
pub mod control;
pub mod matcore;
mod quad;
pub mod riccati;
pub mod selftest;
