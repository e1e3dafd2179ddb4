//! Quantum multi-factor authentication tokens, simulated.
//!
//! A token is a device holding `k` two-qubit registers, each prepared from a
//! random 4-bit string that the issuing server keeps in its database. To
//! authenticate, the holder measures a few registers chosen jointly by the
//! server and the client, in bases picked by the server, and sends back the
//! classical results. The server checks each result against the stored
//! string. Measuring collapses a register, so each one answers one
//! challenge only, and an eavesdropper who saw a register measured in one
//! basis learns nothing about the other basis.
//!
//! Modules, bottom up:
//!
//! * [`hmp4`]: exact state-vector simulation of a single register;
//! * [`token`]: the client-side token and its file format;
//! * [`authdb`]: issuing and the server's classical database;
//! * [`protocol`]: the wire messages and client/server state machines;
//! * [`transport`]: in-process channel with taps, and TCP service;
//! * [`adversary`]: attack strategies and Monte Carlo experiments;
//! * [`cli`]: the `qmfa` command line.

pub mod adversary;
pub mod authdb;
pub mod cli;
pub mod hmp4;
pub mod protocol;
pub mod rng;
pub mod token;
pub mod transport;
