//! Access, modify and delete against an in-process server.

use std::sync::Arc;

use viceroy::agent::{AgentStore, LocalTransport, SessionOptions, VcrOptions};
use viceroy::clock::unix_now;
use viceroy::keyhier::ExtendedPrivateKey;
use viceroy::server::{ServerConfig, ViceroyServer};
use viceroy::vcr::{FieldChange, VcrAction};
use viceroy::wrapper::ServerSigningKey;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = Arc::new(ViceroyServer::new(
        ServerSigningKey::generate(),
        ServerConfig::default(),
    )?);
    let transport = LocalTransport::new(server.clone());
    let master = ExtendedPrivateKey::generate_master(&[3u8; 32])?;
    let mut store = AgentStore::new(master.derive_child_priv(0)?.neuter())?;
    let now = unix_now().ok_or("clock")?;

    let opened = store.visit(
        &transport,
        "https://shop.example/",
        now,
        &SessionOptions::default(),
    )?;
    let i = opened.new_session.ok_or("server did not advertise")?;
    store.visit(
        &transport,
        "https://shop.example/shoes",
        now,
        &SessionOptions::default(),
    )?;
    println!(
        "session {} at {}",
        store.sessions()[i].sid(),
        store.sessions()[i].path
    );

    let actions = [
        VcrAction::access(),
        VcrAction::Modify {
            changes: vec![FieldChange::new("email", "", "me@example.com")],
        },
        VcrAction::access(),
        VcrAction::Delete,
    ];
    for (k, action) in actions.into_iter().enumerate() {
        let name = action.name();
        // Same-second identical bodies are replays, so step the timestamp.
        let mut prepared =
            store.prepare_vcr(&[i], action, &VcrOptions::default(), now + k as u64)?;
        prepared.sign_with(&master)?;
        let out = prepared.submit(&transport)?;
        match out.records {
            Some(records) => println!(
                "{name}: {} visits, {:?}",
                records[0].visits.len(),
                records[0].attributes
            ),
            None => println!("{name}: {:?}", out.response),
        }
    }
    Ok(())
}
