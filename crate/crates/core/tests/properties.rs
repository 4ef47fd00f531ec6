use std::sync::OnceLock;

use proptest::prelude::*;

use viceroy::crypto::{PublicKey, SecretKey, Signature};
use viceroy::encoding::{from_wire, to_wire, WireMode};
use viceroy::keyhier::{ChainCode, DerivationPath, ExtendedPublicKey, HARDENED_OFFSET};
use viceroy::vcr::{FieldChange, UnifiedScope, VcrAction, VcrRequest};
use viceroy::wrapper::{ClientId, ServerKeyId, Wrapper};

/// Curve points are expensive to make, so strategies pick from a pool.
fn pool() -> &'static [PublicKey] {
    static POOL: OnceLock<Vec<PublicKey>> = OnceLock::new();
    POOL.get_or_init(|| {
        (0..32)
            .map(|_| SecretKey::generate().public_key())
            .collect()
    })
}

fn pubkey() -> impl Strategy<Value = PublicKey> {
    (0..32usize).prop_map(|i| pool()[i])
}

fn signature() -> impl Strategy<Value = Signature> {
    prop::collection::vec(any::<u8>(), 64).prop_map(|b| Signature::from_bytes(&b).unwrap())
}

fn client_id() -> impl Strategy<Value = ClientId> {
    ("[a-zA-Z_][a-zA-Z0-9_-]{0,15}", "\\PC{1,40}").prop_map(|(n, v)| ClientId::new(n, v).unwrap())
}

fn wrapper() -> impl Strategy<Value = Wrapper> {
    (
        client_id(),
        prop::collection::btree_set(0..32usize, 1..4),
        any::<u64>(),
        any::<[u8; 8]>(),
        signature(),
    )
        .prop_map(|(client_id, keys, issued_at, kid, signature)| Wrapper {
            version: 1,
            client_id,
            vcr_keys: keys.into_iter().map(|i| pool()[i]).collect(),
            issued_at,
            server_key_id: ServerKeyId(kid),
            signature,
        })
}

fn action() -> impl Strategy<Value = VcrAction> {
    let change = ("[a-z_]{1,12}", "\\PC{0,20}", "\\PC{0,20}")
        .prop_map(|(f, o, n)| FieldChange::new(f, o, n));
    prop_oneof![
        prop::option::of(pubkey()).prop_map(|response_key| VcrAction::Access { response_key }),
        prop::collection::vec(change, 1..4).prop_map(|changes| VcrAction::Modify { changes }),
        Just(VcrAction::Delete),
    ]
}

fn path() -> impl Strategy<Value = DerivationPath> {
    prop::collection::vec(0..HARDENED_OFFSET, 0..=4).prop_map(|s| DerivationPath::new(s).unwrap())
}

fn request() -> impl Strategy<Value = VcrRequest> {
    (
        prop::collection::vec(wrapper(), 1..4),
        action(),
        any::<u64>(),
        prop::option::of((pubkey(), any::<[u8; 32]>(), any::<u8>(), 0..HARDENED_OFFSET)),
        prop::collection::vec(path(), 0..3),
        prop::collection::vec(signature(), 0..4),
    )
        .prop_map(
            |(wrappers, action, timestamp, scope, signer_paths, signatures)| {
                let unified = scope.map(|(pk, cc, depth, index)| UnifiedScope {
                    scope_key: ExtendedPublicKey::new(pk, ChainCode(cc), depth, index),
                    session_indices: (0..wrappers.len() as u32).collect(),
                });
                VcrRequest {
                    version: 1,
                    wrappers,
                    action,
                    timestamp,
                    unified,
                    signer_paths,
                    signatures,
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn wrapper_canonical_round_trip(w in wrapper()) {
        let bytes = w.to_canonical().unwrap();
        let back = Wrapper::from_canonical(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &w);
        prop_assert_eq!(back.to_canonical().unwrap(), bytes);
    }

    #[test]
    fn request_canonical_round_trip(r in request()) {
        let bytes = r.to_canonical().unwrap();
        let back = VcrRequest::from_canonical(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(back.to_canonical().unwrap(), bytes);
    }

    #[test]
    fn canonical_encoding_is_injective(a in request(), b in request()) {
        prop_assert_eq!(a == b, a.to_canonical().unwrap() == b.to_canonical().unwrap());
        prop_assert_eq!(
            a.for_submission().signed_body().unwrap() == b.for_submission().signed_body().unwrap(),
            VcrRequest { signatures: vec![], signer_paths: vec![], ..a.clone() }
                == VcrRequest { signatures: vec![], signer_paths: vec![], ..b.clone() }
        );
    }

    #[test]
    fn truncated_encodings_never_decode(r in request(), cut in any::<prop::sample::Index>()) {
        let bytes = r.to_canonical().unwrap();
        let n = cut.index(bytes.as_slice().len());
        prop_assert!(VcrRequest::from_canonical(&bytes.as_slice()[..n]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn wire_modes_agree(r in request()) {
        let opt: VcrRequest = from_wire(&to_wire(&r, WireMode::Optimized), WireMode::Optimized).unwrap();
        let verbose: VcrRequest = from_wire(&to_wire(&r, WireMode::Verbose), WireMode::Verbose).unwrap();
        prop_assert_eq!(&opt, &r);
        prop_assert_eq!(&verbose, &r);
    }

    #[test]
    fn optimized_is_never_larger(w in wrapper()) {
        prop_assert!(to_wire(&w, WireMode::Optimized).len() <= to_wire(&w, WireMode::Verbose).len());
    }
}
