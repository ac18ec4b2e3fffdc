pub use cavm_core as core;
