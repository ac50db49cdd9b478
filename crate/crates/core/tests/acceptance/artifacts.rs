//! Content-addressed artifacts: one origin fetch per host and digest,
//! verified payloads, standard SHA-256 digests.

use std::collections::BTreeSet;
use std::sync::Arc;

use elastikit::artifacts::{ArtifactCache, ArtifactError, ArtifactSource, Digest};
use elastikit::fixtures::TEST_WORKER;
use elastikit::value::Value;
use elastikit::wire::msg_type;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::common;
use crate::ensure;

const SEQUENCES: usize = 100;

fn fib(n: i64) -> i64 {
    let (mut a, mut b) = (0i64, 1i64);
    for _ in 0..n {
        (a, b) = (b, a + b);
    }
    a
}

/// Serves every payload with one bit flipped.
struct Flipping(Vec<u8>);

impl ArtifactSource for Flipping {
    fn fetch(&self, _: &Digest) -> Result<Vec<u8>, ArtifactError> {
        let mut p = self.0.clone();
        p[0] ^= 0x01;
        Ok(p)
    }
}

fn vectors() -> Result<(), String> {
    let cases = [
        (&b""[..], "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
        (&b"abc"[..], "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"),
        (
            &b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"[..],
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1",
        ),
    ];
    for (input, want) in cases {
        let got = Digest::of(input).to_hex();
        ensure!(got == want, "digest of {:?}: got {got}, expected {want}", String::from_utf8_lossy(input));
    }
    Ok(())
}

fn tampered() -> Result<(), String> {
    let payload = b"3 5 8".to_vec();
    let digest = Digest::of(&payload);
    let cache = ArtifactCache::new(Arc::new(Flipping(payload.clone())));
    match cache.fetch(&digest) {
        Err(ArtifactError::VerificationFailed(d)) if d == digest => {}
        other => return Err(format!("tampered fetch returned {other:?}")),
    }
    ensure!(cache.is_empty() && cache.cached_bytes() == 0, "tampered payload was cached");
    let mut bad = payload;
    bad[1] ^= 0x80;
    ensure!(cache.insert(digest, bad).is_err(), "tampered push accepted");
    ensure!(cache.is_empty(), "tampered push was cached");
    Ok(())
}

pub fn run() -> Result<String, String> {
    vectors()?;
    tampered()?;

    let m = common::local_manager("roundrobin:3");
    let workers = (0..3)
        .map(|_| m.deploy(TEST_WORKER, vec![]).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let fetches_before = m.services().frame_count(msg_type::ARTIFACT_FETCH);

    let mut rng = StdRng::seed_from_u64(7);
    let mut published: Vec<(Digest, Vec<i64>)> = Vec::new();
    let mut cached = BTreeSet::new();
    let mut fetched = BTreeSet::new();
    let mut runs = 0;
    for seq in 0..SEQUENCES {
        // Mostly reuse earlier scripts so hosts hit their caches.
        let (digest, ns) = if published.is_empty() || rng.gen_bool(0.3) {
            let ns: Vec<i64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(1..20)).collect();
            let text = ns.iter().map(i64::to_string).collect::<Vec<_>>().join(" ");
            let d = m.publish_artifact(text.as_bytes()).map_err(|e| e.to_string())?;
            published.push((d, ns.clone()));
            (d, ns)
        } else {
            published[rng.gen_range(0..published.len())].clone()
        };
        for _ in 0..rng.gen_range(1..4) {
            let w = &workers[rng.gen_range(0..workers.len())];
            let host = m.resident_host(w).ok_or("worker lost its host")?;
            if !cached.contains(&(host, digest)) && rng.gen_bool(0.1) {
                m.push_artifact(host, digest).map_err(|e| format!("sequence {seq}: push: {e}"))?;
            } else if !cached.contains(&(host, digest)) {
                fetched.insert((host, digest));
            }
            cached.insert((host, digest));
            let got = m
                .invoke(w, "run_script", vec![Value::Bytes(digest.0.to_vec())])
                .map_err(|e| format!("sequence {seq}: run_script: {e}"))?;
            let want = Value::List(ns.iter().map(|&n| Value::Int64(fib(n))).collect());
            ensure!(got == want, "sequence {seq}: script {digest} returned {got:?}, expected {want:?}");
            runs += 1;
        }
    }
    let fetches = m.services().frame_count(msg_type::ARTIFACT_FETCH) - fetches_before;
    ensure!(
        fetches == fetched.len() as u64,
        "{fetches} origin fetches for {} distinct (host, digest) pairs",
        fetched.len()
    );
    m.shutdown();
    Ok(format!(
        "{SEQUENCES} sequences, {runs} script runs, {fetches} fetches = distinct pairs; tampered payload refused; SHA-256 vectors match"
    ))
}
