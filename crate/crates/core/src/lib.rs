//! MISO: privacy-preserving single sign-on through an attested mixer.
pub mod backchannel;
pub mod clock;
pub mod config;
pub mod crypto;
pub mod enclave;
pub mod grants;
pub mod harness;
pub mod idp;
pub mod mixer;
pub mod oauth;
pub mod rp;
pub mod server;
pub mod stack;
pub mod tap;
