//! Code virtualization for a subset of x86-64 with exception-handling
//! protection.

pub mod isa;
pub mod machine;
pub mod cfg;
pub mod vmir;
pub mod assemble;
pub mod eh;
pub mod shadow;
pub mod runtime;
pub mod ossim;
pub mod process;
pub mod pipeline;
pub mod harness;
