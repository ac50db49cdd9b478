//! Content-addressed artifact distribution.
//!
//! The manager holds the origin store; each host keeps an [`ArtifactCache`]
//! that fetches a payload on first use, verifies its SHA-256 against the
//! requested digest and serves later requests locally.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const MAX_ARTIFACT_SIZE: usize = 64 * 1024 * 1024;
pub const DEFAULT_CACHE_BUDGET: usize = 256 * 1024 * 1024;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(payload: &[u8]) -> Self {
        Digest(Sha256::digest(payload).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn parse_hex(s: &str) -> Option<Self> {
        let b = hex::decode(s).ok()?;
        Some(Digest(b.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArtifactError {
    #[error("artifact exceeds {0} bytes")]
    SizeExceeded(usize),
    #[error("unknown digest {0}")]
    UnknownDigest(Digest),
    #[error("payload for {0} failed verification")]
    VerificationFailed(Digest),
    #[error("artifact origin unreachable: {0}")]
    OriginUnreachable(String),
}

/// Where a cache goes on a miss.
pub trait ArtifactSource: Send + Sync {
    fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, ArtifactError>;
}

/// The manager-side store that every host fetches from.
#[derive(Debug, Default)]
pub struct ArtifactOrigin {
    store: RwLock<HashMap<Digest, Arc<Vec<u8>>>>,
}

impl ArtifactOrigin {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `payload` under its SHA-256. Publishing the same bytes twice
    /// keeps a single copy.
    pub fn publish(&self, payload: &[u8]) -> Result<Digest, ArtifactError> {
        if payload.len() > MAX_ARTIFACT_SIZE {
            return Err(ArtifactError::SizeExceeded(MAX_ARTIFACT_SIZE));
        }
        let digest = Digest::of(payload);
        self.store
            .write()
            .unwrap()
            .entry(digest)
            .or_insert_with(|| Arc::new(payload.to_vec()));
        Ok(digest)
    }

    pub fn get(&self, digest: &Digest) -> Option<Arc<Vec<u8>>> {
        self.store.read().unwrap().get(digest).cloned()
    }

    pub fn len(&self) -> usize {
        self.store.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ArtifactSource for ArtifactOrigin {
    fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, ArtifactError> {
        self.get(digest)
            .map(|p| p.as_ref().clone())
            .ok_or(ArtifactError::UnknownDigest(*digest))
    }
}

type FetchResult = Result<Arc<Vec<u8>>, ArtifactError>;

#[derive(Default)]
struct Inflight {
    result: Mutex<Option<FetchResult>>,
    done: Condvar,
}

struct Entry {
    data: Arc<Vec<u8>>,
    tick: u64,
}

#[derive(Default)]
struct CacheState {
    entries: HashMap<Digest, Entry>,
    order: BTreeMap<u64, Digest>,
    bytes: usize,
    tick: u64,
    inflight: HashMap<Digest, Arc<Inflight>>,
}

impl CacheState {
    fn touch(&mut self, digest: &Digest) -> Option<Arc<Vec<u8>>> {
        self.tick += 1;
        let tick = self.tick;
        let e = self.entries.get_mut(digest)?;
        self.order.remove(&e.tick);
        e.tick = tick;
        self.order.insert(tick, *digest);
        Some(e.data.clone())
    }

    fn insert(&mut self, digest: Digest, data: Arc<Vec<u8>>, budget: usize) {
        if data.len() > budget || self.entries.contains_key(&digest) {
            return;
        }
        self.tick += 1;
        self.bytes += data.len();
        self.order.insert(self.tick, digest);
        self.entries.insert(
            digest,
            Entry {
                data,
                tick: self.tick,
            },
        );
        while self.bytes > budget {
            let Some((_, victim)) = self.order.pop_first() else { break };
            if let Some(e) = self.entries.remove(&victim) {
                self.bytes -= e.data.len();
            }
        }
    }
}

/// Per-host LRU cache of verified payloads.
///
/// Concurrent misses on the same digest share a single origin request.
pub struct ArtifactCache {
    source: Arc<dyn ArtifactSource>,
    budget: usize,
    state: Mutex<CacheState>,
    origin_requests: AtomicU64,
}

impl fmt::Debug for ArtifactCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.state.lock().unwrap();
        f.debug_struct("ArtifactCache")
            .field("entries", &st.entries.len())
            .field("bytes", &st.bytes)
            .field("budget", &self.budget)
            .finish()
    }
}

impl ArtifactCache {
    pub fn new(source: Arc<dyn ArtifactSource>) -> Self {
        Self::with_budget(source, DEFAULT_CACHE_BUDGET)
    }

    pub fn with_budget(source: Arc<dyn ArtifactSource>, budget: usize) -> Self {
        Self {
            source,
            budget,
            state: Mutex::new(CacheState::default()),
            origin_requests: AtomicU64::new(0),
        }
    }

    pub fn fetch(&self, digest: &Digest) -> FetchResult {
        let (flight, leader) = {
            let mut st = self.state.lock().unwrap();
            if let Some(hit) = st.touch(digest) {
                return Ok(hit);
            }
            match st.inflight.get(digest) {
                Some(f) => (f.clone(), false),
                None => {
                    let f = Arc::new(Inflight::default());
                    st.inflight.insert(*digest, f.clone());
                    (f, true)
                }
            }
        };

        if !leader {
            let mut slot = flight.result.lock().unwrap();
            while slot.is_none() {
                slot = flight.done.wait(slot).unwrap();
            }
            return slot.clone().unwrap();
        }

        self.origin_requests.fetch_add(1, Ordering::SeqCst);
        let result = self.source.fetch(digest).and_then(|payload| {
            if Digest::of(&payload) == *digest {
                Ok(Arc::new(payload))
            } else {
                Err(ArtifactError::VerificationFailed(*digest))
            }
        });
        {
            let mut st = self.state.lock().unwrap();
            if let Ok(data) = &result {
                st.insert(*digest, data.clone(), self.budget);
            }
            st.inflight.remove(digest);
        }
        *flight.result.lock().unwrap() = Some(result.clone());
        flight.done.notify_all();
        result
    }

    /// Stores a pushed payload after verifying it against `digest`.
    pub fn insert(&self, digest: Digest, payload: Vec<u8>) -> Result<(), ArtifactError> {
        if Digest::of(&payload) != digest {
            return Err(ArtifactError::VerificationFailed(digest));
        }
        self.state
            .lock()
            .unwrap()
            .insert(digest, Arc::new(payload), self.budget);
        Ok(())
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.state.lock().unwrap().entries.contains_key(digest)
    }

    pub fn cached_bytes(&self) -> usize {
        self.state.lock().unwrap().bytes
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached digests, least recently used first.
    pub fn lru_order(&self) -> Vec<Digest> {
        self.state.lock().unwrap().order.values().copied().collect()
    }

    /// Requests issued to the origin so far.
    pub fn origin_requests(&self) -> u64 {
        self.origin_requests.load(Ordering::SeqCst)
    }

    /// Every cached payload hashes to its key.
    pub fn verify_all(&self) -> bool {
        self.state
            .lock()
            .unwrap()
            .entries
            .iter()
            .all(|(d, e)| Digest::of(&e.data) == *d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fips_vectors() {
        assert_eq!(
            Digest::of(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            Digest::of(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn publish_is_idempotent() {
        let o = ArtifactOrigin::new();
        let a = o.publish(b"script").unwrap();
        let b = o.publish(b"script").unwrap();
        assert_eq!(a, b);
        assert_eq!(o.len(), 1);
        assert_eq!(Digest::parse_hex(&a.to_hex()), Some(a));
    }

    #[test]
    fn hit_does_not_touch_origin() {
        let o = Arc::new(ArtifactOrigin::new());
        let d = o.publish(b"hello").unwrap();
        let c = ArtifactCache::new(o.clone());
        assert_eq!(c.fetch(&d).unwrap().as_slice(), b"hello");
        assert_eq!(c.fetch(&d).unwrap().as_slice(), b"hello");
        assert_eq!(c.origin_requests(), 1);
    }

    #[test]
    fn unknown_digest() {
        let c = ArtifactCache::new(Arc::new(ArtifactOrigin::new()));
        let d = Digest::of(b"nope");
        assert_eq!(c.fetch(&d), Err(ArtifactError::UnknownDigest(d)));
        assert!(c.is_empty());
    }

    struct Corrupting(Arc<ArtifactOrigin>);
    impl ArtifactSource for Corrupting {
        fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, ArtifactError> {
            let mut p = self.0.fetch(digest)?;
            p[0] ^= 0x01;
            Ok(p)
        }
    }

    #[test]
    fn corrupted_payload_is_not_cached() {
        let o = Arc::new(ArtifactOrigin::new());
        let d = o.publish(b"payload").unwrap();
        let c = ArtifactCache::new(Arc::new(Corrupting(o)));
        assert_eq!(c.fetch(&d), Err(ArtifactError::VerificationFailed(d)));
        assert!(c.is_empty());
        assert!(c.insert(d, b"Payload".to_vec()).is_err());
        assert!(c.is_empty());
    }

    #[test]
    fn lru_eviction_keeps_budget() {
        let o = Arc::new(ArtifactOrigin::new());
        let ds: Vec<_> = (0..4u8).map(|i| o.publish(&[i; 10]).unwrap()).collect();
        let c = ArtifactCache::with_budget(o, 25);
        c.fetch(&ds[0]).unwrap();
        c.fetch(&ds[1]).unwrap();
        c.fetch(&ds[0]).unwrap(); // 1 is now least recent
        c.fetch(&ds[2]).unwrap();
        assert!(c.cached_bytes() <= 25);
        assert!(c.contains(&ds[0]) && c.contains(&ds[2]) && !c.contains(&ds[1]));
        assert_eq!(c.lru_order(), vec![ds[0], ds[2]]);
    }

    struct Slow(Arc<ArtifactOrigin>, AtomicU64);
    impl ArtifactSource for Slow {
        fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, ArtifactError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(50));
            self.0.fetch(digest)
        }
    }

    #[test]
    fn concurrent_misses_coalesce() {
        let o = Arc::new(ArtifactOrigin::new());
        let d = o.publish(b"shared").unwrap();
        let src = Arc::new(Slow(o, AtomicU64::new(0)));
        let c = Arc::new(ArtifactCache::new(src.clone()));
        let hs: Vec<_> = (0..8)
            .map(|_| {
                let c = c.clone();
                std::thread::spawn(move || c.fetch(&d).unwrap())
            })
            .collect();
        for h in hs {
            assert_eq!(h.join().unwrap().as_slice(), b"shared");
        }
        assert_eq!(src.1.load(Ordering::SeqCst), 1);
    }
}
