//! Blocking supervisor/controller mailbox. The supervisor posts an event and
//! stays blocked (the VM paused) until the controller acknowledges it;
//! configuration changes queue up and are taken at the next VM resume.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guest::Cycles;
use crate::stepper::{StepEvent, StepperKnobs};
use crate::tracker::{PageFaultEvent, TrackMode};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("event channel closed")]
    Closed,
    #[error("acknowledged sequence {got} but the pending event is {expected:?}")]
    BadAck { expected: Option<u64>, got: u64 },
    #[error("timed out waiting for acknowledgment of event {0}")]
    Timeout(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PageFault,
    SingleStep,
}

impl EventKind {
    pub fn code(self) -> u8 {
        match self {
            EventKind::PageFault => 0,
            EventKind::SingleStep => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EventKind::PageFault),
            1 => Some(EventKind::SingleStep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventPayload {
    PageFault(PageFaultEvent),
    Step(StepEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub sequence: u64,
    pub payload: EventPayload,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self.payload {
            EventPayload::PageFault(_) => EventKind::PageFault,
            EventPayload::Step(_) => EventKind::SingleStep,
        }
    }
}

/// A pending reconfiguration. Fields left `None` keep their value; merging
/// two changes keeps the later writer per field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigChange {
    pub timer_value: Option<u64>,
    pub flush_tlb: Option<bool>,
    pub reset_a_bit: Option<bool>,
    pub suppress_virtual_timer: Option<bool>,
    pub do_cache_attack: Option<bool>,
    pub countermeasure_min_cycles: Option<Option<Cycles>>,
    pub track: Vec<(u64, TrackMode)>,
    pub untrack: Vec<u64>,
}

impl ConfigChange {
    pub fn is_empty(&self) -> bool {
        *self == ConfigChange::default()
    }

    pub fn merge(&mut self, later: ConfigChange) {
        macro_rules! take {
            ($($f:ident),*) => { $( if later.$f.is_some() { self.$f = later.$f; } )* };
        }
        take!(
            timer_value,
            flush_tlb,
            reset_a_bit,
            suppress_virtual_timer,
            do_cache_attack,
            countermeasure_min_cycles
        );
        self.track.extend(later.track);
        self.untrack.extend(later.untrack);
    }

    pub fn apply(&self, knobs: &mut StepperKnobs) {
        if let Some(v) = self.timer_value {
            knobs.timer_value = v;
        }
        if let Some(v) = self.flush_tlb {
            knobs.flush_tlb = v;
        }
        if let Some(v) = self.reset_a_bit {
            knobs.reset_a_bit = v;
        }
        if let Some(v) = self.suppress_virtual_timer {
            knobs.suppress_virtual_timer = v;
        }
        if let Some(v) = self.do_cache_attack {
            knobs.do_cache_attack = v;
        }
        if let Some(v) = self.countermeasure_min_cycles {
            knobs.countermeasure_min_cycles = v;
        }
    }
}

#[derive(Debug)]
struct State {
    unacked: VecDeque<Event>,
    next_sequence: u64,
    depth: usize,
    closed: bool,
    pending: ConfigChange,
}

/// Shared handle; clone it to give the supervisor and the controller their
/// ends.
#[derive(Debug, Clone)]
pub struct EventChannel {
    inner: Arc<(Mutex<State>, Condvar)>,
}

impl Default for EventChannel {
    fn default() -> Self {
        Self::new(1)
    }
}

impl EventChannel {
    pub fn new(depth: usize) -> Self {
        EventChannel {
            inner: Arc::new((
                Mutex::new(State {
                    unacked: VecDeque::new(),
                    next_sequence: 1,
                    depth: depth.max(1),
                    closed: false,
                    pending: ConfigChange::default(),
                }),
                Condvar::new(),
            )),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait<'a>(&self, guard: MutexGuard<'a, State>) -> MutexGuard<'a, State> {
        self.inner.1.wait(guard).unwrap_or_else(|e| e.into_inner())
    }

    /// Posts an event and blocks until fewer than `depth` events are
    /// unacknowledged; with the default depth 1 that is until this event's ack.
    pub fn send_event(&self, payload: EventPayload) -> Result<u64, ChannelError> {
        self.send_event_timeout(payload, None)
    }

    pub fn send_event_timeout(&self, payload: EventPayload, timeout: Option<Duration>) -> Result<u64, ChannelError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.lock();
        while st.unacked.len() >= st.depth && !st.closed {
            st = self.wait(st);
        }
        if st.closed {
            return Err(ChannelError::Closed);
        }
        let sequence = st.next_sequence;
        st.next_sequence += 1;
        st.unacked.push_back(Event { sequence, payload });
        self.inner.1.notify_all();
        loop {
            let pending = st.unacked.iter().any(|e| e.sequence == sequence);
            if !pending || st.unacked.len() < st.depth {
                return Ok(sequence);
            }
            if st.closed {
                return Err(ChannelError::Closed);
            }
            match deadline {
                None => st = self.wait(st),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(ChannelError::Timeout(sequence));
                    }
                    st = self.inner.1.wait_timeout(st, d - now).unwrap_or_else(|e| e.into_inner()).0;
                }
            }
        }
    }

    /// Oldest unacknowledged event, without consuming it.
    pub fn poll_event(&self) -> Option<Event> {
        self.lock().unacked.front().cloned()
    }

    /// Like [`poll_event`](Self::poll_event) but waits up to `timeout`.
    /// Returns `Err(Closed)` once the channel is closed and drained.
    pub fn wait_event(&self, timeout: Duration) -> Result<Option<Event>, ChannelError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if let Some(e) = st.unacked.front() {
                return Ok(Some(e.clone()));
            }
            if st.closed {
                return Err(ChannelError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            st = self.inner.1.wait_timeout(st, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    pub fn ack_event(&self, sequence: u64) -> Result<(), ChannelError> {
        let mut st = self.lock();
        let expected = st.unacked.front().map(|e| e.sequence);
        if expected != Some(sequence) {
            return Err(ChannelError::BadAck { expected, got: sequence });
        }
        st.unacked.pop_front();
        self.inner.1.notify_all();
        Ok(())
    }

    pub fn submit_config(&self, change: ConfigChange) {
        self.lock().pending.merge(change);
    }

    /// Called by the supervisor right before resuming the VM.
    pub fn take_config(&self) -> ConfigChange {
        std::mem::take(&mut self.lock().pending)
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.inner.1.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn pending_count(&self) -> usize {
        self.lock().unacked.len()
    }
}

/// Appends one record: sequence (u64 LE), kind (u8), payload length (u32 LE),
/// JSON payload.
pub fn write_event_record(w: &mut impl Write, event: &Event) -> io::Result<()> {
    let payload = serde_json::to_vec(&event.payload).map_err(io::Error::other)?;
    let len = u32::try_from(payload.len()).map_err(io::Error::other)?;
    w.write_all(&event.sequence.to_le_bytes())?;
    w.write_all(&[event.kind().code()])?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&payload)
}

/// Reads records until end of input.
pub fn read_event_records(r: &mut impl Read) -> io::Result<Vec<Event>> {
    let mut out = Vec::new();
    loop {
        let mut seq = [0u8; 8];
        match r.read_exact(&mut seq) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(out),
            Err(e) => return Err(e),
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut payload = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut payload)?;
        let payload: EventPayload = serde_json::from_slice(&payload).map_err(io::Error::other)?;
        let event = Event {
            sequence: u64::from_le_bytes(seq),
            payload,
        };
        if EventKind::from_code(kind[0]) != Some(event.kind()) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "record kind does not match payload"));
        }
        out.push(event);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::AccessType;
    use std::thread;

    fn fault(gpa: u64) -> EventPayload {
        EventPayload::PageFault(PageFaultEvent {
            gpa,
            access: AccessType::Read,
            instruction_index: 0,
        })
    }

    #[test]
    fn poll_on_empty_is_none() {
        assert!(EventChannel::default().poll_event().is_none());
    }

    #[test]
    fn send_returns_after_ack() {
        let ch = EventChannel::default();
        let sup = ch.clone();
        let h = thread::spawn(move || sup.send_event(fault(1)).unwrap());
        let e = loop {
            if let Some(e) = ch.wait_event(Duration::from_millis(50)).unwrap() {
                break e;
            }
        };
        assert_eq!(ch.poll_event(), Some(e.clone()));
        assert_eq!(
            ch.ack_event(e.sequence + 1),
            Err(ChannelError::BadAck { expected: Some(1), got: 2 })
        );
        assert!(!h.is_finished());
        ch.ack_event(e.sequence).unwrap();
        assert_eq!(h.join().unwrap(), 1);
    }

    #[test]
    fn unacked_send_times_out() {
        let ch = EventChannel::default();
        let r = ch.send_event_timeout(fault(1), Some(Duration::from_millis(20)));
        assert_eq!(r, Err(ChannelError::Timeout(1)));
    }

    #[test]
    fn close_releases_blocked_sender() {
        let ch = EventChannel::default();
        let sup = ch.clone();
        let h = thread::spawn(move || sup.send_event(fault(1)));
        while ch.poll_event().is_none() {
            thread::yield_now();
        }
        ch.close();
        assert_eq!(h.join().unwrap(), Err(ChannelError::Closed));
        assert_eq!(ch.send_event(fault(2)), Err(ChannelError::Closed));
    }

    #[test]
    fn config_merge_is_last_writer_wins() {
        let ch = EventChannel::default();
        ch.submit_config(ConfigChange { timer_value: Some(5), flush_tlb: Some(true), ..Default::default() });
        ch.submit_config(ConfigChange { timer_value: Some(9), ..Default::default() });
        let c = ch.take_config();
        assert_eq!(c.timer_value, Some(9));
        assert_eq!(c.flush_tlb, Some(true));
        assert!(ch.take_config().is_empty());
    }

    #[test]
    fn event_log_round_trips() {
        let events = vec![
            Event { sequence: 1, payload: fault(0x1000) },
            Event { sequence: 2, payload: fault(0x2000) },
        ];
        let mut buf = Vec::new();
        for e in &events {
            write_event_record(&mut buf, e).unwrap();
        }
        assert_eq!(&buf[0..8], &1u64.to_le_bytes());
        assert_eq!(buf[8], 0);
        assert_eq!(read_event_records(&mut buf.as_slice()).unwrap(), events);
    }
}
