pub mod agent;
pub mod b64;
pub mod bench;
pub mod cli;
pub mod clock;
pub mod crypto;
pub mod encoding;
mod fsutil;
pub mod keyhier;
pub mod replay;
pub mod server;
pub mod signer;
pub mod vcr;
pub mod wrapper;
