//! Session keys from a device key, and why child secrets must stay put.

use viceroy::keyhier::{recover_parent_priv, DerivationPath, Derive, ExtendedPrivateKey};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let master = ExtendedPrivateKey::generate_master(&[7u8; 32])?;
    let device = master.derive_child_priv(0)?;
    let device_pub = device.neuter();
    println!("device xpub m/0: {device_pub}");

    // The agent only holds the xpub but derives the same session keys.
    for j in 0..3 {
        let p: DerivationPath = format!("m/0/{j}").parse()?;
        let from_priv = master.derive_path(&p)?.public_key();
        let from_pub = device_pub.derive_child_pub(j)?;
        assert_eq!(&from_priv, from_pub.public_key());
        println!("{p}  {from_priv}");
    }

    let leaked = device.derive_child_priv(5)?;
    let recovered = recover_parent_priv(&device_pub, leaked.secret_key(), 5)?;
    assert_eq!(&recovered, device.secret_key());
    println!("one leaked session secret plus the device xpub recovers the device secret");
    Ok(())
}
