//! Signing keys behind a passphrase and a unix socket.

use std::sync::{Arc, Mutex};

use viceroy::keyhier::{DerivationPath, Derive};
use viceroy::signer::{DaemonHandle, KdfParams, Signer, SignerClient, SignerError};
use viceroy::vcr::SigningOracle;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let state = dir.path().join("signer.json");
    Signer::init(&state, "hunter2", &[10u8; 32], KdfParams::fast_insecure())?;

    let mut signer = Signer::open(&state)?;
    match signer.unlock("wrong") {
        Err(SignerError::WrongPassphrase) => println!("wrong passphrase refused"),
        other => println!("unexpected: {other:?}"),
    }
    signer.unlock("hunter2")?;

    let socket = dir.path().join("signer.sock");
    let daemon = DaemonHandle::spawn(Arc::new(Mutex::new(signer)), &socket)?;
    let client = SignerClient::new(daemon.socket());

    let device = client.issue_device_xpub(0)?;
    println!("device 0: {device}");
    let path: DerivationPath = "m/0/4".parse()?;
    let digest = [0xabu8; 32];
    let sig = client.sign_digest(&path, &digest, Some("ACCESS request over 1 session(s)"))?;
    let key = device.derive_path(&path.suffix(1))?;
    assert!(key.public_key().verify_prehash(&digest, &sig));
    println!("signature from {path} verifies under the device xpub");

    client.retire_device(0)?;
    println!(
        "after retiring: {}",
        client.sign_digest(&path, &digest, None).unwrap_err()
    );
    Ok(())
}
