//! The reference server over real HTTP on 127.0.0.1.

use std::sync::Arc;

use viceroy::agent::{AgentStore, HttpTransport, SessionOptions, VcrOptions};
use viceroy::clock::unix_now;
use viceroy::keyhier::ExtendedPrivateKey;
use viceroy::server::{http, ServerConfig, ViceroyServer};
use viceroy::vcr::VcrAction;
use viceroy::wrapper::ServerSigningKey;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = Arc::new(ViceroyServer::new(
        ServerSigningKey::generate(),
        ServerConfig::default(),
    )?);
    let running = http::spawn(server, ([127, 0, 0, 1], 0).into())?;
    let origin = running.origin();
    println!("serving {origin}");

    let master = ExtendedPrivateKey::generate_master(&[9u8; 32])?;
    let mut store = AgentStore::new(master.derive_child_priv(0)?.neuter())?;
    let transport = HttpTransport::new()?;
    let now = unix_now().ok_or("clock")?;
    for page in ["/", "/search?q=boots", "/checkout"] {
        let out = store.visit(
            &transport,
            &format!("{origin}{page}"),
            now,
            &SessionOptions::default(),
        )?;
        println!(
            "GET {page} -> {} (new session: {:?})",
            out.status, out.new_session
        );
    }

    let mut prepared = store.prepare_vcr(&[0], VcrAction::access(), &VcrOptions::default(), now)?;
    prepared.sign_with(&master)?;
    let out = prepared.submit(&transport)?;
    for v in &out.records.unwrap_or_default()[0].visits {
        println!("server saw {} at {}", v.url, v.visited_at);
    }
    running.stop();
    Ok(())
}
