#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod entropy;
pub mod lax;
pub mod locking;
pub mod maxsearch;
pub mod numfmt;
pub mod observables;
pub mod shadowing;
