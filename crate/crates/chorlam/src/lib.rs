//! A toolchain for a choreographic lambda calculus.
//!
//! A *choreography* is a single global program describing the joint
//! behaviour of several roles, including the communications between them.
//! This crate provides the whole pipeline:
//!
//! - [`ast`] — terms, types, roles and the syntactic meta-operations
//!   (free variables, substitution, role substitution, synchronising roles).
//! - [`surface`] — a concrete `.chor` syntax with parser and pretty-printer.
//! - [`typecheck`] — the role-aware typing judgement `Θ;Σ;Γ ⊢ M : T`,
//!   producing a type-decorated AST.
//! - [`runtime`] — the labelled small-step semantics of choreographies,
//!   including the term-rewriting relation used for out-of-order execution.
//! - [`process`] — the target process language: behaviours with `⊥`,
//!   local typing, and the rendezvous network semantics.
//! - [`project`] — endpoint projection of typed choreographies onto roles,
//!   with the partial merge operator and the pruning order.
//! - [`conform`] — an executable metatheory harness: random well-typed
//!   choreographies plus mechanical checks of progress, preservation,
//!   operational correspondence, deadlock-freedom and adequacy.
//! - [`cli`] — drivers for the `chorlam` binary
//!   (`check`, `run`, `project`, `simulate`, `conform`).
//!
//! The `examples/` directory contains one runnable example per capability;
//! `corpus/` holds the choreographies used throughout the test suite.

pub mod ast;
pub mod cli;
pub mod conform;
pub mod process;
pub mod project;
pub mod runtime;
pub mod surface;
pub mod typecheck;
