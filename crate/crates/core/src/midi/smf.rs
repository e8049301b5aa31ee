//! Standard MIDI File reading and writing.
//!
//! Only what the note pipeline needs: header and track chunks, running status,
//! variable-length quantities, tempo meta events and (optionally) the sustain
//! pedal. Tracks of a format-1 file are merged onto one timeline before notes
//! are paired.

use std::collections::{BTreeMap, VecDeque};

use log::warn;

use super::{MidiError, Note, NoteSequence};

const DEFAULT_TEMPO_US: u32 = 500_000;
const SUSTAIN_CC: u8 = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Extend note releases while the sustain pedal (CC64 >= 64) is held.
    pub sustain_pedal: bool,
}

/// Warnings raised while building notes. None of them abort the parse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    /// NOTE_ON events never released; closed at their track's end.
    pub dangling_note_ons: usize,
    /// Notes whose duration came out zero or negative.
    pub dropped_zero_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timing {
    TicksPerQuarter(u16),
    /// SMPTE: frames per second and ticks per frame.
    Smpte(u8, u8),
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
    NoteOff { channel: u8, pitch: u8 },
    Sustain { channel: u8, on: bool },
    Tempo(u32),
    EndOfTrack,
}

#[derive(Debug, Clone, Copy)]
struct TimedEvent {
    tick: u64,
    track: usize,
    seq: usize,
    kind: Kind,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self.data.get(self.pos).ok_or(MidiError::TruncatedChunk {
            offset: self.pos,
        })?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(MidiError::TruncatedChunk { offset: self.pos });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::MalformedEvent {
            offset: self.pos,
            reason: "variable-length quantity longer than 4 bytes",
        })
    }
}

/// Parses an SMF byte buffer into a note sequence with default options.
pub fn parse_midi(bytes: &[u8]) -> Result<NoteSequence, MidiError> {
    parse_midi_with(bytes, ParseOptions::default()).map(|(seq, _)| seq)
}

pub fn parse_midi_with(
    bytes: &[u8],
    options: ParseOptions,
) -> Result<(NoteSequence, ParseReport), MidiError> {
    let mut r = Reader::new(bytes);
    let (format, ntracks, timing) = read_header(&mut r)?;
    if format == 2 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if format > 2 {
        return Err(MidiError::MalformedHeader("unknown format"));
    }

    let mut events = Vec::new();
    let mut track_ends = Vec::new();
    let mut track = 0usize;
    while r.remaining() > 0 && track < usize::from(ntracks) {
        let id = r.take(4)?;
        let len = r.u32_be()? as usize;
        let start = r.pos;
        let body = r.take(len).map_err(|_| MidiError::TruncatedChunk { offset: start })?;
        if id != b"MTrk" {
            continue;
        }
        let end = read_track(body, start, track, &mut events)?;
        track_ends.push(end);
        track += 1;
    }
    if track < usize::from(ntracks) {
        return Err(MidiError::TruncatedChunk { offset: r.pos });
    }

    // Stable merge: by tick, then by track, then by position inside the track.
    events.sort_by_key(|e| (e.tick, e.track, e.seq));
    let clock = TempoMap::new(timing, &events);
    let (notes, report) = pair_notes(&events, &track_ends, &clock, options);

    let ticks_per_quarter = match timing {
        Timing::TicksPerQuarter(t) => t,
        Timing::Smpte(..) => 0,
    };
    Ok((
        NoteSequence::new(notes, ticks_per_quarter, String::new()),
        report,
    ))
}

fn read_header(r: &mut Reader<'_>) -> Result<(u16, u16, Timing), MidiError> {
    let magic = r
        .take(4)
        .map_err(|_| MidiError::MalformedHeader("file shorter than header"))?;
    if magic != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd magic"));
    }
    let len = r
        .u32_be()
        .map_err(|_| MidiError::MalformedHeader("file shorter than header"))?
        as usize;
    if len < 6 {
        return Err(MidiError::MalformedHeader("header chunk shorter than 6 bytes"));
    }
    let body = r.take(len)?;
    let format = u16::from_be_bytes([body[0], body[1]]);
    let ntracks = u16::from_be_bytes([body[2], body[3]]);
    let division = u16::from_be_bytes([body[4], body[5]]);
    let timing = if division & 0x8000 != 0 {
        let fps = (-((division >> 8) as u8 as i8)) as u8;
        let tpf = (division & 0xff) as u8;
        if fps == 0 || tpf == 0 {
            return Err(MidiError::MalformedHeader("invalid SMPTE division"));
        }
        Timing::Smpte(fps, tpf)
    } else {
        if division == 0 {
            return Err(MidiError::MalformedHeader("zero ticks per quarter note"));
        }
        Timing::TicksPerQuarter(division)
    };
    if format == 0 && ntracks != 1 {
        return Err(MidiError::MalformedHeader("format 0 must have exactly one track"));
    }
    Ok((format, ntracks, timing))
}

/// Decodes one track body, returning the tick of its last event.
fn read_track(
    body: &[u8],
    base: usize,
    track: usize,
    out: &mut Vec<TimedEvent>,
) -> Result<u64, MidiError> {
    let mut r = Reader::new(body);
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut seq = 0usize;
    let mut push = |tick: u64, kind: Kind, out: &mut Vec<TimedEvent>| {
        out.push(TimedEvent {
            tick,
            track,
            seq,
            kind,
        });
        seq += 1;
    };
    let offset_err = |r: &Reader<'_>, e: MidiError| match e {
        MidiError::TruncatedChunk { .. } => MidiError::TruncatedChunk { offset: base + r.pos },
        other => other,
    };

    while r.remaining() > 0 {
        let delta = r.vlq().map_err(|e| offset_err(&r, e))?;
        tick += u64::from(delta);
        let first = r.u8().map_err(|e| offset_err(&r, e))?;
        match first {
            0xff => {
                let ty = r.u8().map_err(|e| offset_err(&r, e))?;
                let len = r.vlq().map_err(|e| offset_err(&r, e))? as usize;
                let data = r.take(len).map_err(|e| offset_err(&r, e))?;
                running = None;
                match ty {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        push(tick, Kind::Tempo(us), out);
                    }
                    0x2f => {
                        push(tick, Kind::EndOfTrack, out);
                        return Ok(tick);
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq().map_err(|e| offset_err(&r, e))? as usize;
                r.take(len).map_err(|e| offset_err(&r, e))?;
                running = None;
            }
            0xf1..=0xfe => {
                return Err(MidiError::MalformedEvent {
                    offset: base + r.pos - 1,
                    reason: "system common/real-time message inside a track",
                });
            }
            _ => {
                let (status, d1) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, r.u8().map_err(|e| offset_err(&r, e))?)
                } else {
                    let status = running.ok_or(MidiError::MalformedEvent {
                        offset: base + r.pos - 1,
                        reason: "data byte without running status",
                    })?;
                    (status, first)
                };
                let channel = status & 0x0f;
                match status & 0xf0 {
                    0x80 => {
                        r.u8().map_err(|e| offset_err(&r, e))?;
                        push(tick, Kind::NoteOff { channel, pitch: d1 & 0x7f }, out);
                    }
                    0x90 => {
                        let v = r.u8().map_err(|e| offset_err(&r, e))?;
                        let pitch = d1 & 0x7f;
                        if v == 0 {
                            push(tick, Kind::NoteOff { channel, pitch }, out);
                        } else {
                            push(
                                tick,
                                Kind::NoteOn {
                                    channel,
                                    pitch,
                                    velocity: v & 0x7f,
                                },
                                out,
                            );
                        }
                    }
                    0xb0 => {
                        let v = r.u8().map_err(|e| offset_err(&r, e))?;
                        if d1 == SUSTAIN_CC {
                            push(tick, Kind::Sustain { channel, on: v >= 64 }, out);
                        }
                    }
                    0xa0 | 0xe0 => {
                        r.u8().map_err(|e| offset_err(&r, e))?;
                    }
                    0xc0 | 0xd0 => {}
                    _ => unreachable!("status byte has its high bit set"),
                }
            }
        }
    }
    // Track without an explicit end-of-track meta event.
    Ok(tick)
}

/// Piecewise-linear tick → seconds conversion built from the merged tempo events.
struct TempoMap {
    timing: Timing,
    /// (tick, seconds at tick, microseconds per quarter from tick on)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn new(timing: Timing, events: &[TimedEvent]) -> Self {
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_US)];
        if let Timing::TicksPerQuarter(tpq) = timing {
            for e in events {
                if let Kind::Tempo(us) = e.kind {
                    let &(t0, s0, us0) = segments.last().expect("non-empty");
                    let secs = s0 + (e.tick - t0) as f64 * f64::from(us0) / 1e6 / f64::from(tpq);
                    if e.tick == t0 {
                        segments.pop();
                    }
                    segments.push((e.tick, secs, us));
                }
            }
        }
        TempoMap { timing, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        match self.timing {
            Timing::Smpte(fps, tpf) => tick as f64 / (f64::from(fps) * f64::from(tpf)),
            Timing::TicksPerQuarter(tpq) => {
                let i = self.segments.partition_point(|s| s.0 <= tick) - 1;
                let (t0, s0, us) = self.segments[i];
                s0 + (tick - t0) as f64 * f64::from(us) / 1e6 / f64::from(tpq)
            }
        }
    }
}

struct Open {
    onset_tick: u64,
    velocity: u8,
    track: usize,
}

fn pair_notes(
    events: &[TimedEvent],
    track_ends: &[u64],
    clock: &TempoMap,
    options: ParseOptions,
) -> (Vec<Note>, ParseReport) {
    let mut report = ParseReport::default();
    let mut open: BTreeMap<(u8, u8), VecDeque<Open>> = BTreeMap::new();
    // Released while the pedal was down: (channel, pitch) → pending notes.
    let mut held: BTreeMap<(u8, u8), Vec<Open>> = BTreeMap::new();
    let mut pedal = [false; 16];
    let mut raw: Vec<(u64, u64, u8, u8)> = Vec::new();

    for e in events {
        match e.kind {
            Kind::NoteOn {
                channel,
                pitch,
                velocity,
            } => {
                if let Some(pending) = held.remove(&(channel, pitch)) {
                    // Re-striking a sustained pitch ends the ringing note.
                    for n in pending {
                        raw.push((n.onset_tick, e.tick, pitch, n.velocity));
                    }
                }
                open.entry((channel, pitch)).or_default().push_back(Open {
                    onset_tick: e.tick,
                    velocity,
                    track: e.track,
                });
            }
            Kind::NoteOff { channel, pitch } => {
                let Some(n) = open.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front) else {
                    continue;
                };
                if options.sustain_pedal && pedal[usize::from(channel)] {
                    held.entry((channel, pitch)).or_default().push(n);
                } else {
                    raw.push((n.onset_tick, e.tick, pitch, n.velocity));
                }
            }
            Kind::Sustain { channel, on } if options.sustain_pedal => {
                pedal[usize::from(channel)] = on;
                if !on {
                    let keys: Vec<_> = held.keys().filter(|k| k.0 == channel).copied().collect();
                    for k in keys {
                        for n in held.remove(&k).unwrap_or_default() {
                            raw.push((n.onset_tick, e.tick, k.1, n.velocity));
                        }
                    }
                }
            }
            _ => {}
        }
    }

    let last_tick = track_ends.iter().copied().max().unwrap_or(0);
    for ((_, pitch), queue) in open {
        for n in queue {
            report.dangling_note_ons += 1;
            let end = track_ends.get(n.track).copied().unwrap_or(last_tick);
            raw.push((n.onset_tick, end, pitch, n.velocity));
        }
    }
    for ((_, pitch), pending) in held {
        for n in pending {
            raw.push((n.onset_tick, last_tick, pitch, n.velocity));
        }
    }
    if report.dangling_note_ons > 0 {
        warn!(
            "{} note(s) never released; closed at end of track",
            report.dangling_note_ons
        );
    }

    let mut notes = Vec::with_capacity(raw.len());
    for (on, off, pitch, velocity) in raw {
        let onset = clock.seconds(on);
        let offset = clock.seconds(off);
        if offset > onset {
            notes.push(Note {
                pitch,
                velocity,
                onset,
                offset,
            });
        } else {
            report.dropped_zero_length += 1;
        }
    }
    if report.dropped_zero_length > 0 {
        warn!("dropped {} zero-length note(s)", report.dropped_zero_length);
    }
    (notes, report)
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let more = if i > 0 { 0x80 } else { 0 };
        out.push(buf[i] | more);
    }
}

/// Writes notes as a format-0 file on channel 0 with a single tempo event.
///
/// Times are rounded to the nearest tick. Releases are written as
/// NOTE_ON/velocity 0 and sort before onsets at the same tick.
pub fn write_midi(notes: &[Note], ticks_per_quarter: u16, tempo_us: u32) -> Vec<u8> {
    let tps = f64::from(ticks_per_quarter) * 1e6 / f64::from(tempo_us);
    let to_tick = |s: f64| (s * tps).round().max(0.0) as u64;
    let mut evs: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        evs.push((to_tick(n.onset), 1, n.pitch, n.velocity));
        evs.push((to_tick(n.offset), 0, n.pitch, 0));
    }
    evs.sort();

    let mut track = Vec::new();
    write_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x51, 0x03]);
    track.extend_from_slice(&tempo_us.to_be_bytes()[1..]);
    let mut last = 0u64;
    for (tick, _, pitch, vel) in evs {
        write_vlq(&mut track, (tick - last) as u32);
        track.extend_from_slice(&[0x90, pitch, vel]);
        last = tick;
    }
    write_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(format: u16, ntracks: u16, division: u16) -> Vec<u8> {
        let mut v = b"MThd".to_vec();
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&format.to_be_bytes());
        v.extend_from_slice(&ntracks.to_be_bytes());
        v.extend_from_slice(&division.to_be_bytes());
        v
    }

    fn track(body: &[u8]) -> Vec<u8> {
        let mut v = b"MTrk".to_vec();
        v.extend_from_slice(&(body.len() as u32).to_be_bytes());
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn vlq_round_trips() {
        for v in [0u32, 1, 127, 128, 0x3fff, 0x4000, 0x0fff_ffff] {
            let mut buf = Vec::new();
            write_vlq(&mut buf, v);
            assert_eq!(Reader::new(&buf).vlq().unwrap(), v);
        }
        let mut buf = Vec::new();
        write_vlq(&mut buf, 0x80);
        assert_eq!(buf, [0x81, 0x00]);
    }

    #[test]
    fn end_of_track_only_is_empty() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[0x00, 0xff, 0x2f, 0x00]));
        assert!(parse_midi(&bytes).unwrap().notes.is_empty());
    }

    #[test]
    fn rejects_bad_magic_and_format_2() {
        assert!(matches!(
            parse_midi(b"RIFF\0\0\0\x06\0\0\0\x01\x01\xe0"),
            Err(MidiError::MalformedHeader(_))
        ));
        assert!(matches!(parse_midi(b"MTh"), Err(MidiError::MalformedHeader(_))));
        let mut bytes = header(2, 1, 480);
        bytes.extend(track(&[0x00, 0xff, 0x2f, 0x00]));
        assert!(matches!(parse_midi(&bytes), Err(MidiError::UnsupportedFormat(2))));
    }

    #[test]
    fn truncated_track_chunk() {
        let mut bytes = header(0, 1, 480);
        let mut t = track(&[0x00, 0x90, 60, 80, 0x10, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00]);
        t.truncate(t.len() - 5);
        bytes.extend(t);
        assert!(matches!(parse_midi(&bytes), Err(MidiError::TruncatedChunk { .. })));
    }

    #[test]
    fn running_status_and_dangling_note() {
        let mut bytes = header(0, 1, 480);
        // on 60, (running) on 64 vel 0 is a release of nothing, on 62; 62 never released
        bytes.extend(track(&[
            0x00, 0x90, 60, 80, 0x83, 0x60, 60, 0, 0x00, 62, 90, 0x83, 0x60, 0xff, 0x2f, 0x00,
        ]));
        let (seq, report) = parse_midi_with(&bytes, ParseOptions::default()).unwrap();
        assert_eq!(report.dangling_note_ons, 1);
        assert_eq!(seq.notes.len(), 2);
        assert_eq!(seq.notes[0].pitch, 60);
        assert!((seq.notes[0].offset - 0.5).abs() < 1e-12);
        assert_eq!(seq.notes[1].pitch, 62);
        assert!((seq.notes[1].offset - 1.0).abs() < 1e-12);
    }

    #[test]
    fn format1_tempo_track_applies_to_note_track() {
        let mut bytes = header(1, 2, 96);
        // conductor: 60 BPM from tick 0, 120 BPM from tick 96
        bytes.extend(track(&[
            0x00, 0xff, 0x51, 0x03, 0x0f, 0x42, 0x40, 0x60, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20,
            0x00, 0xff, 0x2f, 0x00,
        ]));
        // note 0..192 ticks = 1 s + 0.5 s
        bytes.extend(track(&[0x00, 0x90, 70, 64, 0x81, 0x40, 0x80, 70, 0, 0x00, 0xff, 0x2f, 0x00]));
        let seq = parse_midi(&bytes).unwrap();
        assert_eq!(seq.notes.len(), 1);
        assert!((seq.notes[0].offset - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sustain_pedal_extends_release() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[
            0x00, 0xb0, 64, 127, // pedal down
            0x00, 0x90, 60, 80, // note on
            0x83, 0x60, 0x80, 60, 0, // release at 0.5 s, held
            0x83, 0x60, 0xb0, 64, 0, // pedal up at 1.0 s
            0x00, 0xff, 0x2f, 0x00,
        ]));
        let plain = parse_midi(&bytes).unwrap();
        assert!((plain.notes[0].offset - 0.5).abs() < 1e-12);
        let (pedalled, _) = parse_midi_with(&bytes, ParseOptions { sustain_pedal: true }).unwrap();
        assert!((pedalled.notes[0].offset - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_length_notes_are_dropped() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[0x00, 0x90, 60, 80, 0x00, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00]));
        let (seq, report) = parse_midi_with(&bytes, ParseOptions::default()).unwrap();
        assert!(seq.notes.is_empty());
        assert_eq!(report.dropped_zero_length, 1);
    }

    #[test]
    fn writer_output_parses_back() {
        let notes = vec![
            Note { pitch: 60, velocity: 80, onset: 0.0, offset: 0.5 },
            Note { pitch: 64, velocity: 70, onset: 0.25, offset: 1.0 },
            Note { pitch: 60, velocity: 90, onset: 0.5, offset: 0.75 },
        ];
        let bytes = write_midi(&notes, 480, 500_000);
        let seq = parse_midi(&bytes).unwrap();
        assert_eq!(seq.notes, notes);
    }
}
