//! Two devices under one signer, an export to a new machine, and retiring a
//! lost device.

use std::sync::Arc;

use viceroy::agent::{
    export_store, import_store, AgentStore, LocalTransport, SessionOptions, VcrOptions,
};
use viceroy::clock::unix_now;
use viceroy::encoding::WireMode;
use viceroy::server::{ServerConfig, ViceroyServer};
use viceroy::signer::{KdfParams, Signer};
use viceroy::vcr::VcrAction;
use viceroy::wrapper::ServerSigningKey;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut signer = Signer::init(
        dir.path().join("signer.json"),
        "pw",
        &[11u8; 32],
        KdfParams::fast_insecure(),
    )?;
    let server = Arc::new(ViceroyServer::new(
        ServerSigningKey::generate(),
        ServerConfig::default(),
    )?);
    let transport = LocalTransport::new(server);
    let now = unix_now().ok_or("clock")?;

    let mut laptop = AgentStore::new(signer.issue_device_xpub(0)?)?;
    let mut phone = AgentStore::new(signer.issue_device_xpub(1)?)?;
    laptop.visit(
        &transport,
        "https://a.example/",
        now,
        &SessionOptions::default(),
    )?;
    phone.visit(
        &transport,
        "https://b.example/",
        now,
        &SessionOptions::default(),
    )?;
    println!(
        "laptop {}  phone {}",
        laptop.sessions()[0].path,
        phone.sessions()[0].path
    );

    // Move the laptop's sessions to a new machine.
    let moved = import_store(&export_store(&laptop, WireMode::Optimized))?;
    println!(
        "imported {} session(s) for device {}",
        moved.sessions().len(),
        moved.device_id()
    );

    signer.retire_device(1)?;
    let mut p = phone.prepare_vcr(&[0], VcrAction::access(), &VcrOptions::default(), now)?;
    println!(
        "phone after retiring: {}",
        p.sign_with(&signer).unwrap_err()
    );

    let mut p = moved.prepare_vcr(&[0], VcrAction::access(), &VcrOptions::default(), now)?;
    p.sign_with(&signer)?;
    println!("laptop still works: {:?}", p.submit(&transport)?.status);
    Ok(())
}
