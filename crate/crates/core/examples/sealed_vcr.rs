//! Sealing hides the request; an encrypted response hides the data.

use std::sync::Arc;

use viceroy::agent::{AgentStore, LocalTransport, SessionOptions, VcrOptions};
use viceroy::clock::unix_now;
use viceroy::keyhier::ExtendedPrivateKey;
use viceroy::server::{ServerConfig, VcrResponse, ViceroyServer};
use viceroy::vcr::VcrAction;
use viceroy::wrapper::ServerSigningKey;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = Arc::new(ViceroyServer::new(
        ServerSigningKey::generate(),
        ServerConfig::default(),
    )?);
    let transport = LocalTransport::new(server);
    let master = ExtendedPrivateKey::generate_master(&[8u8; 32])?;
    let mut store = AgentStore::new(master.derive_child_priv(0)?.neuter())?;
    let now = unix_now().ok_or("clock")?;
    let i = store
        .visit(
            &transport,
            "https://clinic.example/appointments",
            now,
            &SessionOptions::default(),
        )?
        .new_session
        .ok_or("no session")?;

    let opts = VcrOptions {
        seal: true,
        encrypt_response: true,
        ..Default::default()
    };
    let mut prepared = store.prepare_vcr(&[i], VcrAction::access(), &opts, now)?;
    prepared.sign_with(&master)?;
    let body = prepared.body()?;
    println!("on the wire: {}...", &body[..body.len().min(96)]);

    let out = prepared.submit(&transport)?;
    assert!(matches!(out.response, VcrResponse::Encrypted(_)));
    for r in out.records.unwrap_or_default() {
        println!("decrypted: {} {:?}", r.client_id, r.visits);
    }
    Ok(())
}
