// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sleep-diary quality modelling.
//!
//! [`diary`] holds the data model and input encoding, [`synthgen`] builds
//! labelled synthetic populations with a known quality function, [`qnet`] is
//! the recurrent quality/interval network, [`linear`] the stepwise OLS
//! baseline, [`recommend`] the behaviour recommenders and [`evalx`] the
//! evaluation and explanation protocols.

#![forbid(unsafe_code)]

pub mod diary;
pub mod evalx;
pub mod linear;
pub mod qnet;
pub mod recommend;
pub mod stats;
pub mod synthgen;
