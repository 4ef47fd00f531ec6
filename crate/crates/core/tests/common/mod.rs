#![allow(dead_code)]

use viceroy::keyhier::{DerivationPath, Derive, ExtendedPrivateKey};

pub struct Vector {
    pub seed: &'static str,
    pub path: &'static [u32],
    pub secret: &'static str,
    pub chain: &'static str,
    pub public: &'static str,
}

const SEED1: &str = "000102030405060708090a0b0c0d0e0f";
const SEED2: &str = "fffcf9f6f3f0edeae7e4e1dedbd8d5d2cfccc9c6c3c0bdbab7b4b1aeaba8a5a29f9c999693908d8a8784817e7b7875726f6c696663605d5a5754514e4b484542";
const SEED3: &str = "4b381541583be4423346c643850da4b320e46a87ae3d2a4e6da11eba819cd4acba45d239319ac14f863b8d5ab5a0d0c64d2e8a1e7d1457df2e5a3c51c73235be";

/// Frozen output of `tests/oracles/bip32_oracle.py`.
pub const VECTORS: &[Vector] = &[
    Vector {
        seed: SEED1,
        path: &[],
        secret: "e8f32e723decf4051aefac8e2c93c9c5b214313817cdb01a1494b917c8436b35",
        chain: "873dff81c02f525623fd1fe5167eac3a55a049de3d314bb42ee227ffed37d508",
        public: "0339a36013301597daef41fbe593a02cc513d0b55527ec2df1050e2e8ff49c85c2",
    },
    Vector {
        seed: SEED1,
        path: &[1],
        secret: "4df92b81d2727c0434dc6567e01ceaec80e408974b131b8085490313d2f82a9e",
        chain: "8dd96414ff4d5b4750be3af7fecce207173f86d6b5f58f9366297180de8e109b",
        public: "037c2098fd2235660734667ff8821dbbe0e6592d43cfd86b5dde9ea7c839b93a50",
    },
    Vector {
        seed: SEED1,
        path: &[0, 1],
        secret: "472e3788b980839678da16b6a285113a1edb579114b62f9efe628335049fca83",
        chain: "5013ca9e43f801ce6e41c5dcef2dff48b184f9b030867c2849072ed0f0d85f1d",
        public: "02e740d213a1aa5746c66bae1ecda3b95d7f64d4bf8aff9d93702fc302f28df0f1",
    },
    Vector {
        seed: SEED2,
        path: &[0],
        secret: "abe74a98f6c7eabee0428f53798f0ab8aa1bd37873999041703c742f15ac7e1e",
        chain: "f0909affaa7ee7abe5dd4e100598d4dc53cd709d5a5c2cac40e7412f232f7c9c",
        public: "02fc9e5af0ac8d9b3cecfe2a888e2117ba3d089d8585886c9c826b6b22a98d12ea",
    },
    Vector {
        seed: SEED2,
        path: &[0, 7, 3],
        secret: "552af979dd5a21303c88c243d418362899f0efa874aca913129278de9479e046",
        chain: "e13dede94a0b31f6c53d362413e7cc82b534383075ef51d7c12b2788b9ed4ef3",
        public: "0398dc6caba6c58cfc9218f0bf40020d53b8559300809c82dece766d971104efe3",
    },
    Vector {
        seed: SEED3,
        path: &[5, 2, 9, 4],
        secret: "c62fe030513c03deae6d61b3d860eae799704e1198b55cea7a6b1ea8caf5d92e",
        chain: "9e5b83e4159b0194ddeae51b4aa0af9c07937bf5f4637d464542b19e10c2837e",
        public: "022ebc1bcd14f9d705bcdaa055d9ca32173f964c2ac58b93acd56a6041036d6f9e",
    },
];

/// Returns a description of the first mismatch, if any.
pub fn check_vector(v: &Vector) -> Result<(), String> {
    let master = ExtendedPrivateKey::generate_master(&hex::decode(v.seed).unwrap())
        .map_err(|e| e.to_string())?;
    let path = DerivationPath::new(v.path.to_vec()).map_err(|e| e.to_string())?;
    let key = master.derive_path(&path).map_err(|e| e.to_string())?;
    let got = (
        hex::encode(key.secret_key().to_bytes()),
        hex::encode(key.chain_code().0),
        key.public_key().to_hex(),
    );
    let want = (
        v.secret.to_string(),
        v.chain.to_string(),
        v.public.to_string(),
    );
    if got == want {
        Ok(())
    } else {
        Err(format!("{path}: got {got:?}, want {want:?}"))
    }
}
