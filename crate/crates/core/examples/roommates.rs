//! A shared session that needs every roommate's signature.

use std::sync::Arc;

use viceroy::agent::{AgentError, AgentStore, LocalTransport, SessionOptions, VcrOptions};
use viceroy::clock::unix_now;
use viceroy::keyhier::{DerivationPath, ExtendedPrivateKey};
use viceroy::server::{ServerConfig, ViceroyServer};
use viceroy::vcr::VcrAction;
use viceroy::wrapper::ServerSigningKey;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = Arc::new(ViceroyServer::new(
        ServerSigningKey::generate(),
        ServerConfig::default(),
    )?);
    let transport = LocalTransport::new(server);
    let alice = ExtendedPrivateKey::generate_master(&[6u8; 32])?;
    let bob = ExtendedPrivateKey::generate_master(&[7u8; 32])?;
    let bob_path: DerivationPath = "m/0/0".parse()?;
    let bob_key = bob.derive_child_priv(0)?.derive_child_priv(0)?.public_key();

    let mut store = AgentStore::new(alice.derive_child_priv(0)?.neuter())?;
    let shared = SessionOptions {
        co_signers: vec![bob_key],
        ..Default::default()
    };
    let now = unix_now().ok_or("clock")?;
    let i = store
        .visit(&transport, "https://tv.example/", now, &shared)?
        .new_session
        .ok_or("no session")?;
    println!(
        "wrapper binds {} keys",
        store.sessions()[i].wrapper.vcr_keys.len()
    );

    let mut alone = store.prepare_vcr(&[i], VcrAction::access(), &VcrOptions::default(), now)?;
    alone.sign_with(&alice)?;
    match alone.submit(&transport) {
        Err(AgentError::ServerRejected { error, .. }) => println!("alice alone: {error}"),
        other => println!("alice alone: unexpected {other:?}"),
    }

    let mut both = store.prepare_vcr(&[i], VcrAction::access(), &VcrOptions::default(), now + 1)?;
    both.sign_with(&alice)?;
    both.cosign(&bob, &bob_path)?;
    let out = both.submit(&transport)?;
    println!(
        "alice and bob: {} record(s)",
        out.records.map_or(0, |r| r.len())
    );
    Ok(())
}
