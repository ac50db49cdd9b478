use std::io::Cursor;

use elastikit::wire::{decode_frame, encode_frame, read_frame, FrameDecoder, WireError, HEADER_LEN, MAX_FRAME_PAYLOAD};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::alloc::largest_allocation;
use crate::common::gen;
use crate::ensure;

const MESSAGES: usize = 10_000;
const FUZZ_BYTES: usize = 1 << 20;

pub fn run() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(6);

    // Round trips, frame by frame and as one chunked stream.
    let mut stream = Vec::new();
    let mut sent = Vec::with_capacity(MESSAGES);
    for i in 0..MESSAGES {
        let m = gen::message(&mut rng);
        let rid: u64 = rng.gen();
        let frame = encode_frame(&m, rid).map_err(|e| format!("message {i} failed to encode: {e}"))?;
        let (back, back_rid, used) = decode_frame(&frame).map_err(|e| format!("message {i}: {e}"))?;
        ensure!(back == m && back_rid == rid, "message {i} changed in transit: {m:?} -> {back:?}");
        ensure!(used == frame.len(), "message {i}: consumed {used} of {} bytes", frame.len());
        stream.extend_from_slice(&frame);
        sent.push((m, rid));
    }
    let mut dec = FrameDecoder::new();
    let mut got = Vec::with_capacity(MESSAGES);
    let mut pos = 0;
    while pos < stream.len() {
        let n = rng.gen_range(1..4096).min(stream.len() - pos);
        dec.push(&stream[pos..pos + n]);
        pos += n;
        while let Some(r) = dec.next_frame() {
            got.push(r.map_err(|e| format!("stream decode: {e}"))?);
        }
    }
    ensure!(dec.finish().is_ok(), "decoder left bytes over");
    ensure!(got == sent, "chunked stream decoded differently");
    let mut cur = Cursor::new(&stream);
    for (i, want) in sent.iter().enumerate() {
        let r = read_frame(&mut cur).map_err(|e| format!("read_frame {i}: {e}"))?;
        ensure!(&r == want, "read_frame {i} differs");
    }

    // Random bytes, plus valid frames with corrupted bytes.
    let noise: Vec<u8> = (0..FUZZ_BYTES).map(|_| rng.gen()).collect();
    let mut corrupted = stream[..FUZZ_BYTES.min(stream.len())].to_vec();
    for _ in 0..corrupted.len() / 64 {
        let i = rng.gen_range(0..corrupted.len());
        corrupted[i] ^= 1 << rng.gen_range(0..8);
    }
    let ((frames, errors), largest) = largest_allocation(|| {
        let mut frames = 0usize;
        let mut errors = 0usize;
        for input in [&noise, &corrupted] {
            let mut dec = FrameDecoder::new();
            let mut pos = 0;
            while pos < input.len() {
                let n = rng.gen_range(1..8192).min(input.len() - pos);
                dec.push(&input[pos..pos + n]);
                pos += n;
                while let Some(r) = dec.next_frame() {
                    match r {
                        Ok(_) => frames += 1,
                        Err(_) => errors += 1,
                    }
                }
            }
            let mut cur = Cursor::new(input.as_slice());
            loop {
                match read_frame(&mut cur) {
                    Ok(_) => frames += 1,
                    Err(WireError::ConnectionClosed) => break,
                    Err(_) => errors += 1,
                }
            }
            for off in (0..input.len()).step_by(97) {
                match decode_frame(&input[off..]) {
                    Ok(_) => frames += 1,
                    Err(_) => errors += 1,
                }
            }
        }
        (frames, errors)
    });
    let cap = MAX_FRAME_PAYLOAD + HEADER_LEN;
    ensure!(largest <= cap, "fuzzing made a {largest}-byte allocation, cap is {cap}");

    // A header declaring 4 GiB is refused before any buffer is made.
    let mut huge = vec![0xFF, 0xFF, 0xFF, 0xFF, 0x02];
    huge.extend_from_slice(&[0; 8]);
    huge.extend_from_slice(&[0; 64]);
    let (r, largest_huge) = largest_allocation(|| read_frame(&mut Cursor::new(&huge)));
    ensure!(r.is_err(), "oversized frame accepted");
    ensure!(largest_huge < 4096, "oversized header caused a {largest_huge}-byte allocation");

    Ok(format!(
        "{MESSAGES} round trips exact; fuzz {} bytes: {frames} frames, {errors} errors, largest allocation {largest} B",
        noise.len() + corrupted.len()
    ))
}
