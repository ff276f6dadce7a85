//! Differential check of instruction lengths against iced-x86 on random
//! byte strings shaped like common compiler output.

use iced_x86::{Code, Decoder, DecoderOptions, Mnemonic};
use pmpatch_core::x86::{decode_one, InstrClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_insn(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut v = Vec::new();
    for _ in 0..rng.gen_range(0..3) {
        v.push([0x66, 0xF2, 0xF3, 0x2E, 0x64, 0x67, 0xF0][rng.gen_range(0..7)]);
    }
    if rng.gen_bool(0.5) {
        v.push(0x40 | rng.gen_range(0..16));
    }
    match rng.gen_range(0..5) {
        0 | 1 => {}
        2 => v.push(0x0F),
        3 => v.extend_from_slice(&[0x0F, [0x38, 0x3A][rng.gen_range(0..2)]]),
        _ => v.push([0xC4, 0xC5, 0x62][rng.gen_range(0..3)]),
    }
    for _ in 0..14 {
        v.push(rng.gen());
    }
    v
}

#[test]
fn lengths_match_reference_on_valid_encodings() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut compared = 0;
    let mut mismatches = Vec::new();
    let mut refused = Vec::new();
    for _ in 0..200_000 {
        let bytes = random_insn(&mut rng);
        let mut d = Decoder::with_ip(64, &bytes, 0, DecoderOptions::NONE);
        let r = d.decode();
        if r.is_invalid() || r.code() == Code::INVALID {
            continue;
        }
        // 3DNow!, XOP and similar are deliberately outside the tables.
        if matches!(r.mnemonic(), Mnemonic::Femms) || bytes.starts_with(&[0x8F]) {
            continue;
        }
        let ours = decode_one(&bytes, 0).unwrap();
        compared += 1;
        if ours.class == InstrClass::Undecodable {
            refused.push(format!("{:02x?} {:?}", &bytes[..r.len()], r.code()));
            continue;
        }
        if ours.length != r.len() {
            mismatches.push(format!("{:02x?} ours={} iced={} {:?}", &bytes[..r.len().max(ours.length)], ours.length, r.len(), r.code()));
        }
    }
    assert!(compared > 10_000);
    // Refusing is safe but should stay rare on encodings the reference accepts.
    assert!(refused.len() * 100 < compared, "{} of {compared} refused:\n{}", refused.len(), refused[..refused.len().min(30)].join("\n"));
    assert!(mismatches.is_empty(), "{} mismatches, first:\n{}", mismatches.len(), mismatches[..mismatches.len().min(30)].join("\n"));
}
