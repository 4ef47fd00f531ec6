//! Timestamp freshness plus a cache of request digests seen inside the
//! tolerance window.

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

pub const DEFAULT_TOLERANCE_SECS: u64 = 300;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ReplayError {
    #[error("request timestamp is older than the tolerance window")]
    StaleTimestamp,
    #[error("request timestamp is ahead of the tolerance window")]
    FutureTimestamp,
    #[error("request already seen")]
    ReplayDetected,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    first_seen: u64,
    /// Last second at which the request's timestamp is still fresh. Once
    /// `now` passes this, any replay fails the freshness check, so the entry
    /// can go.
    fresh_until: u64,
}

#[derive(Debug, Default)]
struct Inner {
    entries: HashMap<[u8; 32], Entry>,
    last_sweep: u64,
}

/// Concurrent replay cache. `check_and_insert` is atomic: of any number of
/// simultaneous submissions of one digest, exactly one succeeds.
#[derive(Debug)]
pub struct ReplayCache {
    tolerance: u64,
    inner: Mutex<Inner>,
}

impl Default for ReplayCache {
    fn default() -> Self {
        Self::new(DEFAULT_TOLERANCE_SECS)
    }
}

impl ReplayCache {
    pub fn new(tolerance_secs: u64) -> Self {
        ReplayCache {
            tolerance: tolerance_secs,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn tolerance(&self) -> u64 {
        self.tolerance
    }

    /// `|now - timestamp| <= tolerance`.
    pub fn check_freshness(&self, timestamp: u64, now: u64) -> Result<(), ReplayError> {
        if now > timestamp && now - timestamp > self.tolerance {
            return Err(ReplayError::StaleTimestamp);
        }
        if timestamp > now && timestamp - now > self.tolerance {
            return Err(ReplayError::FutureTimestamp);
        }
        Ok(())
    }

    pub fn check_and_insert(
        &self,
        digest: [u8; 32],
        timestamp: u64,
        now: u64,
    ) -> Result<(), ReplayError> {
        self.check_freshness(timestamp, now)?;
        let mut inner = self.inner.lock().expect("replay cache poisoned");
        if now > inner.last_sweep {
            inner.entries.retain(|_, e| e.fresh_until >= now);
            inner.last_sweep = now;
        }
        if inner.entries.contains_key(&digest) {
            return Err(ReplayError::ReplayDetected);
        }
        inner.entries.insert(
            digest,
            Entry {
                first_seen: now,
                fresh_until: timestamp.saturating_add(self.tolerance),
            },
        );
        Ok(())
    }

    /// Drops entries whose requests can no longer pass the freshness check.
    pub fn evict_expired(&self, now: u64) {
        let mut inner = self.inner.lock().expect("replay cache poisoned");
        inner.entries.retain(|_, e| e.fresh_until >= now);
        inner.last_sweep = now;
    }

    pub fn len(&self) -> usize {
        self.inner
            .lock()
            .expect("replay cache poisoned")
            .entries
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Oldest `first_seen` among live entries.
    pub fn oldest_entry(&self) -> Option<u64> {
        let inner = self.inner.lock().expect("replay cache poisoned");
        inner.entries.values().map(|e| e.first_seen).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_offsets() {
        let cache = ReplayCache::new(300);
        let now = 10_000;
        for (offset, expected) in [
            (-301i64, Err(ReplayError::StaleTimestamp)),
            (-300, Ok(())),
            (-299, Ok(())),
            (0, Ok(())),
            (299, Ok(())),
            (300, Ok(())),
            (301, Err(ReplayError::FutureTimestamp)),
        ] {
            let ts = (now as i64 + offset) as u64;
            assert_eq!(cache.check_freshness(ts, now), expected, "offset {offset}");
        }
    }

    #[test]
    fn duplicate_rejected_then_evicted_and_stale() {
        let cache = ReplayCache::new(60);
        let d = [7u8; 32];
        cache.check_and_insert(d, 1000, 1000).unwrap();
        assert_eq!(
            cache.check_and_insert(d, 1000, 1030),
            Err(ReplayError::ReplayDetected)
        );
        cache.evict_expired(1061);
        assert!(cache.is_empty());
        assert_eq!(
            cache.check_and_insert(d, 1000, 1061),
            Err(ReplayError::StaleTimestamp)
        );
    }

    #[test]
    fn future_dated_entry_outlives_its_window() {
        // Accepted at the far edge of the future window; must still be
        // remembered until its own timestamp goes stale.
        let cache = ReplayCache::new(60);
        let d = [1u8; 32];
        cache.check_and_insert(d, 1060, 1000).unwrap();
        for now in [1061, 1100, 1120] {
            assert_eq!(
                cache.check_and_insert(d, 1060, now),
                Err(ReplayError::ReplayDetected),
                "now {now}"
            );
        }
        assert_eq!(
            cache.check_and_insert(d, 1060, 1121),
            Err(ReplayError::StaleTimestamp)
        );
    }
}
