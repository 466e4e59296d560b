//! Standard MIDI File reading and writing.
//!
//! Reading accepts formats 0 and 1 with running status. Timing stays in
//! ticks; tempo is ignored. Writing always produces a format 1 file with
//! one track per part, no running status.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::time::{div_round_half_away, Beats, Meter, MeterMap};

/// Resolution used for every file this crate writes.
pub const OUTPUT_PPQ: u16 = 480;
/// Velocity used for every written note-on.
pub const OUTPUT_VELOCITY: u8 = 80;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("truncated data at byte {offset}: {reason}")]
    Truncation { offset: usize, reason: String },
    #[error("bad event at byte {offset}: {reason}")]
    Event { offset: usize, reason: String },
    #[error("{beats} beats is not representable at {ppq} ticks per quarter note")]
    Quantization { beats: Beats, ppq: u16 },
}

/// Pitch of a monophonic event, or a rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pitch {
    Note(u8),
    Rest,
}

impl Pitch {
    pub fn midi(self) -> Option<u8> {
        match self {
            Pitch::Note(p) => Some(p),
            Pitch::Rest => None,
        }
    }

    pub fn is_rest(self) -> bool {
        matches!(self, Pitch::Rest)
    }
}

impl fmt::Display for Pitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pitch::Note(p) => write!(f, "{p}"),
            Pitch::Rest => f.write_str("rest"),
        }
    }
}

/// One monophonic note or rest, in beats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoteEvent {
    pub pitch: Pitch,
    pub duration: Beats,
    pub onset: Beats,
}

impl NoteEvent {
    pub fn note(pitch: u8, onset: Beats, duration: Beats) -> Self {
        NoteEvent { pitch: Pitch::Note(pitch), duration, onset }
    }

    pub fn rest(onset: Beats, duration: Beats) -> Self {
        NoteEvent { pitch: Pitch::Rest, duration, onset }
    }

    pub fn end(&self) -> Beats {
        self.onset + self.duration
    }
}

/// Checks the monophony invariants: positive durations, strictly increasing
/// onsets, and no note starting more than 0.001 beats before the previous ends.
pub fn is_monophonic(notes: &[NoteEvent]) -> bool {
    let slack = Beats::from_millis(1);
    notes.iter().all(|n| n.duration > Beats::ZERO)
        && notes
            .windows(2)
            .all(|w| w[1].onset > w[0].onset && w[1].onset + slack >= w[0].end())
}

/// A sounding note as stored in the file, in ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawNote {
    pub onset_tick: u64,
    pub off_tick: u64,
    pub pitch: u8,
    pub velocity: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawTrack {
    /// Sorted by onset; simultaneous onsets in descending pitch.
    pub events: Vec<RawNote>,
    pub channel: u8,
}

impl RawTrack {
    pub fn new(channel: u8, mut events: Vec<RawNote>) -> Self {
        events.sort_by(|a, b| a.onset_tick.cmp(&b.onset_tick).then(b.pitch.cmp(&a.pitch)));
        RawTrack { events, channel }
    }

    /// Notes converted to beats, without rests. Durations are taken as the
    /// difference of the rounded endpoints so adjacent notes stay adjacent.
    pub fn to_note_events(&self, ppq: u16) -> Vec<NoteEvent> {
        self.events
            .iter()
            .filter_map(|e| {
                let onset = ticks_to_beats(e.onset_tick, ppq);
                let duration = ticks_to_beats(e.off_tick, ppq) - onset;
                (duration > Beats::ZERO).then(|| NoteEvent::note(e.pitch, onset, duration))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeSignature {
    pub tick: u64,
    pub meter: Meter,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MidiPiece {
    pub tracks: Vec<RawTrack>,
    pub ppq: u16,
    /// Sorted, first entry at tick 0.
    pub time_signatures: Vec<TimeSignature>,
    pub name: String,
}

impl MidiPiece {
    pub fn meter_map(&self) -> MeterMap {
        MeterMap::new(
            self.time_signatures
                .iter()
                .map(|ts| (ticks_to_beats(ts.tick, self.ppq), ts.meter))
                .collect(),
        )
    }
}

/// `tick / ppq` rounded half away from zero to three decimals.
pub fn ticks_to_beats(tick: u64, ppq: u16) -> Beats {
    assert!(ppq > 0, "ppq must be positive");
    Beats::from_millis(div_round_half_away(i128::from(tick) * 1000, i128::from(ppq)) as i64)
}

/// Nearest tick to a beat value.
pub fn beats_to_ticks(beats: Beats, ppq: u16) -> u64 {
    div_round_half_away(i128::from(beats.millis()) * i128::from(ppq), 1000).max(0) as u64
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(MidiError::Truncation {
                offset: self.pos,
                reason: format!("{what}: need {n} bytes, {} left", self.remaining()),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, MidiError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, MidiError> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, MidiError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self, what: &str) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8(what)?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::Event { offset: start, reason: format!("{what}: variable-length quantity exceeds 4 bytes") })
    }
}

/// Parse a Standard MIDI File (format 0 or 1).
///
/// Each track chunk is split by channel, so a format 0 file with two
/// channels yields two tracks. Tracks without notes are dropped.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiPiece, MidiError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.remaining() < 4 || &bytes[..4] != b"MThd" {
        return Err(MidiError::Header { offset: 0, reason: "missing MThd chunk id".into() });
    }
    r.pos = 4;
    let header_len = r.u32("header length")? as usize;
    if header_len < 6 {
        return Err(MidiError::Header { offset: 4, reason: format!("header length {header_len} < 6") });
    }
    let header_start = r.pos;
    let format = r.u16("format")?;
    let ntracks = r.u16("track count")?;
    let division = r.u16("division")?;
    if format > 1 {
        return Err(MidiError::Header { offset: header_start, reason: format!("unsupported format {format}") });
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::Header { offset: header_start + 4, reason: "SMPTE time division not supported".into() });
    }
    if division == 0 {
        return Err(MidiError::Header { offset: header_start + 4, reason: "zero ticks per quarter note".into() });
    }
    r.take(header_len - 6, "header padding")?;

    let mut tracks = Vec::new();
    let mut time_signatures = Vec::new();
    let mut name = String::new();
    let mut seen = 0u16;
    while seen < ntracks && r.remaining() > 0 {
        let chunk_start = r.pos;
        let id = r.take(4, "chunk id")?;
        let len = r.u32("chunk length")? as usize;
        if r.remaining() < len {
            return Err(MidiError::Truncation {
                offset: chunk_start,
                reason: format!("chunk declares {len} bytes, {} left", r.remaining()),
            });
        }
        let body_start = r.pos;
        r.pos += len;
        if id != b"MTrk" {
            continue;
        }
        seen += 1;
        let parsed = parse_track(&bytes[body_start..body_start + len], body_start)?;
        if name.is_empty() {
            if let Some(n) = parsed.name {
                name = n;
            }
        }
        time_signatures.extend(parsed.time_signatures);
        tracks.extend(parsed.tracks);
    }
    if seen < ntracks {
        return Err(MidiError::Truncation {
            offset: r.pos,
            reason: format!("header declares {ntracks} tracks, found {seen}"),
        });
    }

    time_signatures.sort_by_key(|ts: &TimeSignature| ts.tick);
    let mut merged: Vec<TimeSignature> = Vec::new();
    for ts in time_signatures {
        match merged.last_mut() {
            Some(last) if last.tick == ts.tick => *last = ts,
            _ => merged.push(ts),
        }
    }
    if merged.first().map_or(true, |ts| ts.tick > 0) {
        merged.insert(0, TimeSignature { tick: 0, meter: Meter::COMMON });
    }

    Ok(MidiPiece { tracks, ppq: division, time_signatures: merged, name })
}

struct ParsedTrack {
    tracks: Vec<RawTrack>,
    time_signatures: Vec<TimeSignature>,
    name: Option<String>,
}

#[derive(Default)]
struct OpenNote {
    onset_tick: u64,
    velocity: u8,
    depth: u32,
}

fn parse_track(body: &[u8], base: usize) -> Result<ParsedTrack, MidiError> {
    let mut r = Reader { bytes: body, pos: 0 };
    let at = |pos: usize| base + pos;
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), OpenNote> = HashMap::new();
    let mut notes: HashMap<u8, Vec<RawNote>> = HashMap::new();
    let mut time_signatures = Vec::new();
    let mut name = None;

    let truncation = |e: MidiError| match e {
        MidiError::Truncation { offset, reason } => MidiError::Truncation { offset: base + offset, reason },
        MidiError::Event { offset, reason } => MidiError::Event { offset: base + offset, reason },
        other => other,
    };

    while r.remaining() > 0 {
        tick += u64::from(r.vlq("delta time").map_err(truncation)?);
        let status_pos = r.pos;
        let first = r.u8("status").map_err(truncation)?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => {
                    return Err(MidiError::Event {
                        offset: at(status_pos),
                        reason: format!("data byte {first:#04x} with no running status"),
                    })
                }
            }
        };

        match status {
            0xff => {
                running = None;
                let kind = r.u8("meta type").map_err(truncation)?;
                let len = r.vlq("meta length").map_err(truncation)? as usize;
                let data = r.take(len, "meta data").map_err(truncation)?;
                match kind {
                    0x2f => break,
                    0x03 if name.is_none() => {
                        let text = String::from_utf8_lossy(data).trim().to_string();
                        if !text.is_empty() {
                            name = Some(text);
                        }
                    }
                    0x58 if len >= 2 => {
                        // denominator is stored as a power of two
                        if data[0] > 0 && data[1] <= 6 {
                            time_signatures.push(TimeSignature {
                                tick,
                                meter: Meter::new(data[0], 1u8 << data[1]),
                            });
                        }
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq("sysex length").map_err(truncation)? as usize;
                r.take(len, "sysex data").map_err(truncation)?;
            }
            0xf1..=0xfe => {
                return Err(MidiError::Event {
                    offset: at(status_pos),
                    reason: format!("system message {status:#04x} inside a track"),
                });
            }
            _ => {
                running = Some(status);
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let n_data = if matches!(kind, 0xc0 | 0xd0) { 1 } else { 2 };
                let mut data = [0u8; 2];
                let mut filled = 0;
                if let Some(b) = first_data {
                    data[0] = b;
                    filled = 1;
                }
                while filled < n_data {
                    data[filled] = r.u8("channel message data").map_err(truncation)?;
                    filled += 1;
                }
                if data[..n_data].iter().any(|b| b & 0x80 != 0) {
                    return Err(MidiError::Event {
                        offset: at(status_pos),
                        reason: "status byte where data byte expected".into(),
                    });
                }
                let (pitch, velocity) = (data[0], data[1]);
                match kind {
                    0x90 if velocity > 0 => {
                        let entry = open.entry((channel, pitch)).or_default();
                        if entry.depth == 0 {
                            entry.onset_tick = tick;
                            entry.velocity = velocity;
                        }
                        entry.depth += 1;
                    }
                    0x80 | 0x90 => {
                        if let Some(entry) = open.get_mut(&(channel, pitch)) {
                            if entry.depth > 0 {
                                entry.depth -= 1;
                                if entry.depth == 0 && tick > entry.onset_tick {
                                    notes.entry(channel).or_default().push(RawNote {
                                        onset_tick: entry.onset_tick,
                                        off_tick: tick,
                                        pitch,
                                        velocity: entry.velocity,
                                    });
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
    }

    // close anything still sounding at the end of the track
    for ((channel, pitch), entry) in open {
        if entry.depth > 0 && tick > entry.onset_tick {
            notes.entry(channel).or_default().push(RawNote {
                onset_tick: entry.onset_tick,
                off_tick: tick,
                pitch,
                velocity: entry.velocity,
            });
        }
    }

    let mut channels: Vec<_> = notes.into_iter().collect();
    channels.sort_by_key(|(ch, _)| *ch);
    let tracks = channels.into_iter().map(|(ch, events)| RawTrack::new(ch, events)).collect();
    Ok(ParsedTrack { tracks, time_signatures, name })
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
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
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

fn quantize(beats: Beats, ppq: u16) -> Result<u64, MidiError> {
    let tick = beats_to_ticks(beats, ppq);
    if beats.is_negative() || ticks_to_beats(tick, ppq) != beats {
        return Err(MidiError::Quantization { beats, ppq });
    }
    Ok(tick)
}

fn track_chunk(notes: &[NoteEvent], ppq: u16, channel: u8, name: &str, meters: Option<&MeterMap>) -> Result<Vec<u8>, MidiError> {
    // (tick, order, bytes): note-offs sort before note-ons at the same tick
    let mut events: Vec<(u64, u8, Vec<u8>)> = Vec::new();
    let mut meta = vec![0xff, 0x03];
    push_vlq(&mut meta, name.len() as u32);
    meta.extend_from_slice(name.as_bytes());
    events.push((0, 0, meta));
    if let Some(map) = meters {
        for &(onset, meter) in map.regions() {
            let tick = quantize(onset, ppq)?;
            let exp = meter.denominator.trailing_zeros() as u8;
            events.push((tick, 0, vec![0xff, 0x58, 0x04, meter.numerator, exp, 24, 8]));
        }
    }
    for n in notes {
        let Pitch::Note(p) = n.pitch else { continue };
        let on = quantize(n.onset, ppq)?;
        let off = quantize(n.end(), ppq)?;
        events.push((on, 2, vec![0x90 | channel, p, OUTPUT_VELOCITY]));
        events.push((off, 1, vec![0x80 | channel, p, 0]));
    }
    events.sort_by_key(|(tick, order, _)| (*tick, *order));

    let mut body = Vec::new();
    let mut last = 0u64;
    for (tick, _, bytes) in events {
        push_vlq(&mut body, u32::try_from(tick - last).unwrap_or(u32::MAX));
        body.extend_from_slice(&bytes);
        last = tick;
    }
    body.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut chunk = b"MTrk".to_vec();
    chunk.extend_from_slice(&(body.len() as u32).to_be_bytes());
    chunk.extend_from_slice(&body);
    Ok(chunk)
}

/// Render a source and a target part as a two-track format 1 file.
pub fn write_midi(source: &[NoteEvent], target: &[NoteEvent], ppq: u16) -> Result<Vec<u8>, MidiError> {
    write_midi_with_meter(source, target, ppq, None)
}

/// As [`write_midi`], also writing time-signature events on the first track.
pub fn write_midi_with_meter(
    source: &[NoteEvent],
    target: &[NoteEvent],
    ppq: u16,
    meters: Option<&MeterMap>,
) -> Result<Vec<u8>, MidiError> {
    assert!(ppq > 0 && ppq < 0x8000, "ppq must be in 1..32768");
    let mut out = b"MThd".to_vec();
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&2u16.to_be_bytes());
    out.extend_from_slice(&ppq.to_be_bytes());
    out.extend(track_chunk(source, ppq, 0, "source", meters)?);
    out.extend(track_chunk(target, ppq, 1, "target", None)?);
    Ok(out)
}
