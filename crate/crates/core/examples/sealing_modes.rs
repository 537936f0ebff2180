//! MRENCLAVE sealing follows the exact program; MRSIGNER sealing follows
//! whoever signed it. Two program versions from one signer show the
//! difference.

use std::sync::Arc;

use miso::enclave::{Enclave, Platform, SealMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let platform = Arc::new(Platform::generate()?);
    let secret = b"salt table contents";

    for mode in [SealMode::MrEnclave, SealMode::MrSigner] {
        let v1 = Enclave::install(platform.clone(), b"mixer-v1", "acme", mode, dir.path())?;
        let v2 = Enclave::install(platform.clone(), b"mixer-v2", "acme", mode, dir.path())?;
        let other = Enclave::install(platform.clone(), b"mixer-v1", "mallory", mode, dir.path())?;

        let blob = v1.seal("salt_table", secret)?;
        let same = v1.unseal("salt_table", &blob).is_ok();
        let upgraded = v2.unseal("salt_table", &blob).is_ok();
        let foreign = other.unseal("salt_table", &blob).is_ok();
        println!("{mode:<10} same program: {same:<5}  new version: {upgraded:<5}  other signer: {foreign}");
    }

    let enclave = Enclave::install(platform.clone(), b"mixer-v1", "acme", SealMode::MrEnclave, dir.path())?;
    enclave.seal_to_file("prf_key", &[7u8; 32])?;
    let path = enclave.sealed_path("prf_key");
    let mut bytes = std::fs::read(&path)?;
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, &bytes)?;
    println!(
        "flipped one bit of {}: {:?}",
        path.display(),
        enclave.unseal_from_file("prf_key").err()
    );
    Ok(())
}
