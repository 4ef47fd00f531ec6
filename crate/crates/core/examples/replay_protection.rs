//! Freshness window and duplicate detection.

use viceroy::keyhier::{DerivationPath, ExtendedPrivateKey};
use viceroy::replay::ReplayCache;
use viceroy::vcr::{build_vcr, sign_vcr, verify_vcr, VcrAction};
use viceroy::wrapper::{issue_wrapper, ClientId, MultiSigPolicy, ServerKeyring, ServerSigningKey};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = ServerSigningKey::generate();
    let ring = ServerKeyring::with_key(*server.public_key());
    let master = ExtendedPrivateKey::generate_master(&[4u8; 32])?;
    let path: DerivationPath = "m/0/0".parse()?;
    let key = master
        .derive_child_priv(0)?
        .derive_child_priv(0)?
        .public_key();
    let t = 1_700_000_000;

    let wrapper = issue_wrapper(
        &server,
        ClientId::new("vid", "abc123")?,
        &MultiSigPolicy::single(key),
        t,
    )?;
    let mut req = build_vcr(vec![wrapper], VcrAction::Delete, t)?;
    sign_vcr(&mut req, &master, &path)?;
    let req = req.for_submission();

    let cache = ReplayCache::new(300);
    println!(
        "first:            {:?}",
        verify_vcr(&ring, &req, t, &cache).map(|v| v.action)
    );
    println!(
        "again:            {:?}",
        verify_vcr(&ring, &req, t + 5, &cache).map(|v| v.action)
    );
    println!(
        "301 s late:       {:?}",
        verify_vcr(&ring, &req, t + 301, &ReplayCache::new(300)).map(|v| v.action)
    );
    println!(
        "301 s early:      {:?}",
        verify_vcr(&ring, &req, t - 301, &ReplayCache::new(300)).map(|v| v.action)
    );
    cache.evict_expired(t + 301);
    println!("cached after 301: {}", cache.len());
    Ok(())
}
