//! In-memory sessions with idle expiry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tutor_core::answer::Session;

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

struct Slot {
    session: SessionHandle,
    last_used: Duration,
}

/// Each session sits behind its own async mutex, which hands the lock out
/// in arrival order; the map lock is only held for lookups.
pub struct SessionStore {
    ttl: Duration,
    max_turns: usize,
    slots: Mutex<HashMap<String, Slot>>,
}

impl SessionStore {
    pub fn new(ttl: Duration, max_turns: usize) -> Self {
        Self {
            ttl,
            max_turns,
            slots: Mutex::new(HashMap::new()),
        }
    }

    /// Returns the session for `id`, creating it if absent or expired, and
    /// evicts every other session idle for longer than the TTL.
    pub fn get_or_create(&self, id: &str, now: Duration) -> SessionHandle {
        let mut slots = self.slots.lock().expect("session map lock");
        slots.retain(|_, s| now.saturating_sub(s.last_used) <= self.ttl);
        let slot = slots.entry(id.to_owned()).or_insert_with(|| Slot {
            session: Arc::new(tokio::sync::Mutex::new(Session::new(id, self.max_turns))),
            last_used: now,
        });
        slot.last_used = now;
        slot.session.clone()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("session map lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
