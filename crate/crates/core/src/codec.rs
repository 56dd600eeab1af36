//! XOR packet combination. Decoding is the same operation: XOR the coded
//! payload with every constituent the receiver already holds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub owner: usize,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn new(owner: usize, seq: u64, payload: Vec<u8>) -> Self {
        Packet { owner, seq, payload }
    }
}

/// XORs the payloads whose coefficient is set. Shorter payloads are zero padded.
pub fn xor_combine(packets: &[Packet], coefficients: &[bool]) -> Result<Vec<u8>> {
    if packets.len() != coefficients.len() {
        return Err(Error::CoefficientLength {
            packets: packets.len(),
            coefficients: coefficients.len(),
        });
    }
    if !coefficients.iter().any(|&c| c) {
        return Err(Error::EmptyCombination);
    }
    let selected: Vec<&[u8]> = packets
        .iter()
        .zip(coefficients)
        .filter(|(_, &c)| c)
        .map(|(p, _)| p.payload.as_slice())
        .collect();
    Ok(xor_payloads(&selected))
}

pub fn xor_payloads(payloads: &[&[u8]]) -> Vec<u8> {
    let len = payloads.iter().map(|p| p.len()).max().unwrap_or(0);
    let mut out = vec![0u8; len];
    for p in payloads {
        for (o, b) in out.iter_mut().zip(p.iter()) {
            *o ^= b;
        }
    }
    out
}

/// Recovers the missing constituent of `coded` given the others.
///
/// The result keeps the padded length; callers that know the original length
/// truncate it.
pub fn peel(coded: &[u8], known: &[&[u8]]) -> Vec<u8> {
    let mut all = Vec::with_capacity(known.len() + 1);
    all.push(coded);
    all.extend_from_slice(known);
    xor_payloads(&all)
}
