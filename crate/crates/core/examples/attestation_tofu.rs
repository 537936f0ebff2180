//! An RP checks the mixer's attestation and pins its server key on first
//! use. Tampered reports fail verification, and a mixer that comes back as
//! a different program is refused until the operator re-pins.
//!
//! The stack seals with MRSIGNER so the new program version can still open
//! its state; under MRENCLAVE the upgraded mixer would not start at all.

use miso::enclave::{verify_attestation, SealMode};
use miso::stack::{Stack, StackError, StackOptions};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut opts = StackOptions::new(dir.path());
    opts.topology.seal_mode = SealMode::MrSigner;
    let mut stack = Stack::up(opts).await?;

    let doc: miso::mixer::AttestationDocument = reqwest::get(format!("{}/attestation", stack.mixer_url()))
        .await?
        .json()
        .await?;
    let pk_tee = stack.mixer().tee_public_key();
    let measurement = stack.mixer().measurement();
    println!("measurement {}", hex::encode(doc.measurement));
    println!("pk_server   {}", hex::encode(&doc.pk_server));
    println!(
        "verifies    {}",
        verify_attestation(&pk_tee, &doc.report(), &measurement)
    );

    let mut forged = doc.report();
    forged.payload[0] ^= 0x80;
    println!(
        "swapped key verifies: {}",
        verify_attestation(&pk_tee, &forged, &measurement)
    );

    let pinned = stack.rp(0).pinned().expect("MISO-mode RP pins the mixer");
    println!(
        "rp-0 pinned {} at t={}",
        hex::encode(&pinned.pk_server),
        pinned.pinned_at
    );

    stack.restart_mixer(Some("miso-mixer-v2")).await?;
    match stack.restart_rp(0).await {
        Err(StackError::Rp(e)) => println!("rp-0 after mixer upgrade: {e}"),
        Err(e) => return Err(e.into()),
        Ok(()) => println!("rp-0 accepted the new mixer (unexpected)"),
    }

    stack.down(false).await?;

    let dir = tempfile::tempdir()?;
    let mut stack = Stack::up(StackOptions::new(dir.path())).await?;
    match stack.restart_mixer(Some("miso-mixer-v2")).await {
        Err(e) => println!("mrenclave mixer upgrade: {e}"),
        Ok(()) => println!("mrenclave mixer upgrade started (unexpected)"),
    }
    stack.down(false).await?;
    Ok(())
}
