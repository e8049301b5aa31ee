//! Performance-event vocabulary: 128 NOTE_ON, 128 NOTE_OFF, 100 TIME_SHIFT
//! (10 ms steps up to one second) and 32 VELOCITY bins.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{MidiError, Note, NoteSequence};

const SHIFT_STEP_MS: u32 = 10;
const MAX_SHIFT_STEPS: u32 = 100;
const VELOCITY_BINS: u8 = 32;

/// Bin assumed before the first VELOCITY token (velocity 64).
pub const DEFAULT_VELOCITY_BIN: u8 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyLayout {
    pub note_on: Range<u16>,
    pub note_off: Range<u16>,
    pub time_shift: Range<u16>,
    pub velocity: Range<u16>,
    pub total_size: u16,
}

impl Default for VocabularyLayout {
    fn default() -> Self {
        VocabularyLayout {
            note_on: 0..128,
            note_off: 128..256,
            time_shift: 256..356,
            velocity: 356..388,
            total_size: 388,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    NoteOn(u8),
    NoteOff(u8),
    /// Shift in milliseconds; a multiple of 10 in `10..=1000`.
    TimeShift(u16),
    /// Velocity bin `0..32`; covers velocities `4*bin ..= 4*bin+3`.
    Velocity(u8),
}

impl VocabularyLayout {
    pub fn encode(&self, event: Event) -> u16 {
        match event {
            Event::NoteOn(p) => self.note_on.start + u16::from(p),
            Event::NoteOff(p) => self.note_off.start + u16::from(p),
            Event::TimeShift(ms) => self.time_shift.start + ms / SHIFT_STEP_MS as u16 - 1,
            Event::Velocity(b) => self.velocity.start + u16::from(b),
        }
    }

    pub fn decode(&self, token: u16) -> Option<Event> {
        if self.note_on.contains(&token) {
            Some(Event::NoteOn((token - self.note_on.start) as u8))
        } else if self.note_off.contains(&token) {
            Some(Event::NoteOff((token - self.note_off.start) as u8))
        } else if self.time_shift.contains(&token) {
            Some(Event::TimeShift(
                (token - self.time_shift.start + 1) * SHIFT_STEP_MS as u16,
            ))
        } else if self.velocity.contains(&token) {
            Some(Event::Velocity((token - self.velocity.start) as u8))
        } else {
            None
        }
    }

    pub fn size(&self) -> usize {
        usize::from(self.total_size)
    }
}

pub fn velocity_bin(velocity: u8) -> u8 {
    (velocity / 4).min(VELOCITY_BINS - 1)
}

pub fn bin_velocity(bin: u8) -> u8 {
    (u16::from(bin) * 4 + 2).clamp(1, 127) as u8
}

/// Ordered list of vocabulary tokens, each `< 388`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventSequence(Vec<u16>);

impl EventSequence {
    pub fn new(tokens: Vec<u16>) -> Result<Self, MidiError> {
        let size = VocabularyLayout::default().total_size;
        if let Some(&t) = tokens.iter().find(|&&t| t >= size) {
            return Err(MidiError::InvalidToken(u32::from(t)));
        }
        Ok(EventSequence(tokens))
    }

    pub fn empty() -> Self {
        EventSequence(Vec::new())
    }

    pub fn tokens(&self) -> &[u16] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<u16> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Concatenation of `self` and `other`.
    pub fn concat(&self, other: &EventSequence) -> EventSequence {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        EventSequence(v)
    }

    pub fn slice(&self, range: Range<usize>) -> EventSequence {
        EventSequence(self.0[range].to_vec())
    }

    pub fn push(&mut self, token: u16) {
        assert!(token < 388, "token {token} outside the vocabulary");
        self.0.push(token);
    }
}

impl TryFrom<Vec<u16>> for EventSequence {
    type Error = MidiError;
    fn try_from(v: Vec<u16>) -> Result<Self, MidiError> {
        EventSequence::new(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizeOptions {
    /// Emit VELOCITY only when the bin changes (otherwise before every NOTE_ON).
    pub velocity_on_change: bool,
}

impl Default for TokenizeOptions {
    fn default() -> Self {
        TokenizeOptions {
            velocity_on_change: true,
        }
    }
}

pub fn tokenize(seq: &NoteSequence, layout: &VocabularyLayout) -> EventSequence {
    tokenize_with(seq, layout, TokenizeOptions::default())
}

/// Converts notes to events.
///
/// Event times are snapped to the 10 ms grid; a release that would land on
/// its own onset is pushed one step later so every note keeps a nonzero
/// length. Gaps are written as 1000 ms shifts followed by the remainder.
pub fn tokenize_with(
    seq: &NoteSequence,
    layout: &VocabularyLayout,
    options: TokenizeOptions,
) -> EventSequence {
    let step = f64::from(SHIFT_STEP_MS) / 1000.0;
    // (grid step, 0 = off / 1 = on, pitch, velocity)
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(seq.notes.len() * 2);
    for n in &seq.notes {
        let on = (n.onset / step).round() as u64;
        let off = ((n.offset / step).round() as u64).max(on + 1);
        events.push((on, 1, n.pitch, n.velocity));
        events.push((off, 0, n.pitch, 0));
    }
    events.sort_unstable();

    let mut tokens = Vec::with_capacity(events.len() * 2);
    let mut now = 0u64;
    let mut bin: Option<u8> = None;
    for (at, kind, pitch, velocity) in events {
        push_shift(&mut tokens, layout, at - now);
        now = at;
        if kind == 1 {
            let b = velocity_bin(velocity);
            if !options.velocity_on_change || bin != Some(b) {
                tokens.push(layout.encode(Event::Velocity(b)));
                bin = Some(b);
            }
            tokens.push(layout.encode(Event::NoteOn(pitch)));
        } else {
            tokens.push(layout.encode(Event::NoteOff(pitch)));
        }
    }
    EventSequence(tokens)
}

fn push_shift(tokens: &mut Vec<u16>, layout: &VocabularyLayout, mut steps: u64) {
    while steps > 0 {
        let s = steps.min(u64::from(MAX_SHIFT_STEPS)) as u16;
        tokens.push(layout.encode(Event::TimeShift(s * SHIFT_STEP_MS as u16)));
        steps -= u64::from(s);
    }
}

pub fn detokenize(events: &EventSequence, layout: &VocabularyLayout) -> NoteSequence {
    detokenize_with_report(events, layout).0
}

/// Rebuilds notes; also returns the number of NOTE_OFF tokens that had no open note.
pub fn detokenize_with_report(
    events: &EventSequence,
    layout: &VocabularyLayout,
) -> (NoteSequence, usize) {
    let mut open: Vec<VecDeque<(f64, u8)>> = vec![VecDeque::new(); 128];
    let mut notes = Vec::new();
    let mut orphans = 0usize;
    let mut now_ms: u64 = 0;
    let mut velocity = bin_velocity(DEFAULT_VELOCITY_BIN);
    for &t in events.tokens() {
        match layout.decode(t) {
            Some(Event::TimeShift(ms)) => now_ms += u64::from(ms),
            Some(Event::Velocity(b)) => velocity = bin_velocity(b),
            Some(Event::NoteOn(p)) => open[usize::from(p)].push_back((now_ms as f64 / 1000.0, velocity)),
            Some(Event::NoteOff(p)) => match open[usize::from(p)].pop_front() {
                Some((onset, vel)) => {
                    let offset = now_ms as f64 / 1000.0;
                    if offset > onset {
                        notes.push(Note { pitch: p, velocity: vel, onset, offset });
                    }
                }
                None => orphans += 1,
            },
            None => unreachable!("EventSequence holds only vocabulary tokens"),
        }
    }
    let end = now_ms as f64 / 1000.0;
    for (p, queue) in open.into_iter().enumerate() {
        for (onset, vel) in queue {
            if end > onset {
                notes.push(Note { pitch: p as u8, velocity: vel, onset, offset: end });
            }
        }
    }
    (NoteSequence::new(notes, 480, String::new()), orphans)
}
