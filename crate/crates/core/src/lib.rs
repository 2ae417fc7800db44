//! A sharded key-value store over emulated persistent memory with
//! push-down compute plugins (active data objects).

pub mod ado;
pub mod cdp;
pub mod index;
pub mod pmem;
pub mod store;
