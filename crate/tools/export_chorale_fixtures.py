"""Export outer voices (soprano + bass) of Bach chorales as two-track MIDI.

Requires music21. The chorales ship with music21's corpus; the compositions
are in the public domain. Pickup bars are padded to a full measure so that
measure 0 starts at tick 0.

    python3 tools/export_chorale_fixtures.py fixtures/midi 48
"""

import os
import struct
import sys

from music21 import corpus

PPQ = 480


def vlq(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def track_chunk(name, notes, channel, time_sig=None):
    events = [(0, 0, b"\xff\x03" + vlq(len(name)) + name.encode())]
    if time_sig is not None:
        num, den = time_sig
        events.append((0, 0, bytes([0xFF, 0x58, 4, num, den.bit_length() - 1, 24, 8])))
    for onset, dur, pitch in notes:
        on = round(onset * PPQ)
        off = round((onset + dur) * PPQ)
        if off <= on:
            continue
        events.append((on, 2, bytes([0x90 | channel, pitch, 80])))
        events.append((off, 1, bytes([0x80 | channel, pitch, 0])))
    events.sort(key=lambda e: (e[0], e[1]))
    body = b""
    last = 0
    for tick, _, data in events:
        body += vlq(tick - last) + data
        last = tick
    body += b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + body


def part_notes(part, shift):
    notes = []
    for n in part.stripTies().flatten().notes:
        if n.isChord:
            return None
        notes.append((float(n.offset) + shift, float(n.quarterLength), n.pitch.midi))
    return notes


def export(path, out_dir):
    score = corpus.parse(path)
    if len(score.parts) != 4:
        return None
    first = score.parts[0].getElementsByClass("Measure")[0]
    ts = first.timeSignature or first.getContextByClass("TimeSignature")
    if ts is None or (ts.numerator, ts.denominator) not in {(4, 4), (3, 4)}:
        return None
    shift = float(first.paddingLeft)
    soprano = part_notes(score.parts[0], shift)
    bass = part_notes(score.parts[-1], shift)
    if not soprano or not bass:
        return None
    name = os.path.splitext(os.path.basename(str(path)))[0].replace(".", "_")
    data = b"MThd" + struct.pack(">IHHH", 6, 1, 2, PPQ)
    data += track_chunk("soprano", soprano, 0, (ts.numerator, ts.denominator))
    data += track_chunk("bass", bass, 1)
    with open(os.path.join(out_dir, name + ".mid"), "wb") as f:
        f.write(data)
    return name


def main():
    out_dir = sys.argv[1]
    count = int(sys.argv[2]) if len(sys.argv) > 2 else 48
    os.makedirs(out_dir, exist_ok=True)
    paths = sorted(
        (p for p in corpus.getComposer("bach") if os.path.basename(str(p)).startswith("bwv")),
        key=lambda p: os.path.basename(str(p)),
    )
    written = []
    for path in paths:
        if len(written) >= count:
            break
        try:
            name = export(path, out_dir)
        except Exception as exc:  # malformed corpus entries are skipped
            print("skip", path, exc, file=sys.stderr)
            continue
        if name:
            written.append(name)
    print("\n".join(written))


if __name__ == "__main__":
    main()
