//! A server binds its cookie to a client key; the client checks the echo.

use viceroy::clock::unix_now;
use viceroy::encoding::{byte_size, to_wire, WireMode};
use viceroy::keyhier::ExtendedPrivateKey;
use viceroy::wrapper::{
    check_wrapper_echo, issue_wrapper, verify_wrapper, ClientId, MultiSigPolicy, ServerSigningKey,
    Wrapper,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = ServerSigningKey::generate();
    let session = ExtendedPrivateKey::generate_master(&[1u8; 32])?.derive_child_priv(0)?;
    let cookie = ClientId::new("vid", "5f0c2a9e81d34b7f9c3e2a1d0b8f7e6d")?;
    let policy = MultiSigPolicy::single(session.public_key());

    let wrapper = issue_wrapper(&server, cookie.clone(), &policy, unix_now().unwrap_or(1))?;
    verify_wrapper(server.public_key(), &wrapper)?;
    check_wrapper_echo(&policy, &cookie, &wrapper)?;

    println!("{}", to_wire(&wrapper, WireMode::Verbose));
    println!(
        "canonical {} B, optimized JSON {} B, verbose JSON {} B",
        wrapper.to_canonical()?.0.len(),
        byte_size(&wrapper, WireMode::Optimized),
        byte_size(&wrapper, WireMode::Verbose)
    );

    let mut forged: Wrapper = wrapper.clone();
    forged.vcr_keys = vec![ExtendedPrivateKey::generate_master(&[2u8; 32])?.public_key()];
    println!(
        "swapped key: {}",
        verify_wrapper(server.public_key(), &forged).unwrap_err()
    );
    Ok(())
}
