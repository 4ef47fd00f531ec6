//! One signature over several sessions with the same server.

use std::sync::Arc;

use viceroy::agent::{AgentStore, LocalTransport, SessionOptions, Transport, VcrOptions};
use viceroy::clock::unix_now;
use viceroy::keyhier::ExtendedPrivateKey;
use viceroy::server::{EndpointAdvertisement, ServerConfig, ViceroyServer};
use viceroy::vcr::VcrAction;
use viceroy::wrapper::{ClientId, ServerSigningKey};

const ORIGIN: &str = "https://news.example";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = Arc::new(ViceroyServer::new(
        ServerSigningKey::generate(),
        ServerConfig::default(),
    )?);
    let transport = LocalTransport::new(server);
    let master = ExtendedPrivateKey::generate_master(&[5u8; 32])?;
    let mut store = AgentStore::new(master.derive_child_priv(0)?.neuter())?;
    let now = unix_now().ok_or("clock")?;
    let unified = SessionOptions {
        unified: true,
        ..Default::default()
    };

    // Three cookies, as after clearing cookies between visits.
    let mut sessions = Vec::new();
    for _ in 0..3 {
        let page = transport.get(&format!("{ORIGIN}/"), None)?;
        let ad = EndpointAdvertisement::from_headers(
            page.headers.iter().map(|(n, v)| (n.as_str(), v.as_str())),
        )
        .ok_or("no advertisement")?;
        let (name, value) = page
            .header("set-cookie")
            .and_then(|c| c.split(';').next())
            .and_then(|c| c.split_once('='))
            .ok_or("no cookie")?;
        let i = store.begin_session(
            &transport,
            ORIGIN,
            &ad,
            ClientId::new(name, value)?,
            now,
            &unified,
        )?;
        println!(
            "{}  {}",
            store.sessions()[i].sid(),
            store.sessions()[i].path
        );
        sessions.push(i);
    }

    let opts = VcrOptions {
        unified: true,
        ..Default::default()
    };
    let mut prepared = store.prepare_vcr(&sessions, VcrAction::Delete, &opts, now)?;
    prepared.sign_with(&master)?;
    println!("signatures: {}", prepared.request.signatures.len());
    let out = prepared.submit(&transport)?;
    println!("{:?}", out.response);
    Ok(())
}
