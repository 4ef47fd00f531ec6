mod common;

use viceroy::keyhier::{DerivationPath, Derive, ExtendedPrivateKey};

#[test]
fn pinned_vectors_match_reference() {
    for v in common::VECTORS {
        common::check_vector(v).unwrap();
    }
}

#[test]
fn public_derivation_matches_private_on_vectors() {
    for v in common::VECTORS {
        let master = ExtendedPrivateKey::generate_master(&hex::decode(v.seed).unwrap()).unwrap();
        let path = DerivationPath::new(v.path.to_vec()).unwrap();
        let via_pub = master.neuter().derive_path(&path).unwrap();
        assert_eq!(via_pub.public_key().to_hex(), v.public);
        assert_eq!(hex::encode(via_pub.chain_code().0), v.chain);
    }
}

#[test]
fn xpub_text_roundtrip_on_vectors() {
    for v in common::VECTORS {
        let master = ExtendedPrivateKey::generate_master(&hex::decode(v.seed).unwrap()).unwrap();
        let key = master
            .derive_path(&DerivationPath::new(v.path.to_vec()).unwrap())
            .unwrap()
            .neuter();
        let text = key.to_string();
        assert_eq!(
            text.parse::<viceroy::keyhier::ExtendedPublicKey>().unwrap(),
            key
        );
    }
}
