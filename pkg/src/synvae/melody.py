"""Monophonic melody grammar plus corpus generation and MIDI/WAV rendering.

Melodies are fixed-length token sequences on a 16th-note grid:
token 0 is REST, token 1 is HOLD (sustains the previous note), and tokens
2..89 are note onsets for MIDI pitches 21..108 (pitch = token + 19).
"""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass

import numpy as np

REST = 0
HOLD = 1
VOCAB_SIZE = 90
PITCH_OFFSET = 19  # MIDI pitch = token + PITCH_OFFSET for tokens >= 2
MIN_PITCH = 21
MAX_PITCH = 108
DEFAULT_STEPS = 32

TICKS_PER_QUARTER = 480
TICKS_PER_STEP = 120  # one token step = one 16th note
TEMPO_USEC_PER_QUARTER = 500_000  # 120 BPM

# C-major scale restricted to MIDI 48..84, used by the corpus generator.
_C_MAJOR_CLASSES = (0, 2, 4, 5, 7, 9, 11)
CORPUS_PITCHES = tuple(
    p for p in range(48, 85) if p % 12 in _C_MAJOR_CLASSES
)


def token_to_pitch(token: int) -> int:
    if token < 2 or token >= VOCAB_SIZE:
        raise ValueError(f"token {token} is not a pitch token")
    return token + PITCH_OFFSET


def pitch_to_token(pitch: int) -> int:
    if pitch < MIN_PITCH or pitch > MAX_PITCH:
        raise ValueError(f"MIDI pitch {pitch} outside supported range")
    return pitch - PITCH_OFFSET


def validate_melody(tokens) -> list[str]:
    """Check grammar rules, returning a list of violations (empty = valid)."""
    tokens = np.asarray(tokens)
    violations = []
    for t, tok in enumerate(tokens.tolist()):
        if tok < 0 or tok >= VOCAB_SIZE:
            violations.append(f"step {t}: token {tok} outside [0, {VOCAB_SIZE})")
        elif tok == HOLD:
            if t == 0:
                violations.append("step 0: HOLD with no preceding note")
            elif tokens[t - 1] == REST:
                violations.append(f"step {t}: HOLD directly after REST")
    return violations


def repair_melody(tokens) -> np.ndarray:
    """Rewrite HOLD-at-start / HOLD-after-REST as REST.

    Model decoders may emit ungrammatical HOLDs; rendering treats them as
    silence so that every token sequence in [0, V)^T can be rendered.
    """
    out = np.asarray(tokens, dtype=np.int64).copy()
    for t in range(len(out)):
        if out[t] == HOLD and (t == 0 or out[t - 1] == REST):
            out[t] = REST
    return out


def generate_corpus(count: int, steps: int = DEFAULT_STEPS, seed: int = 0) -> np.ndarray:
    """Generate seeded random-walk melodies over the C-major set in MIDI 48..84.

    Notes last 1-4 steps (extra steps emitted as HOLD); roughly 10% of all
    steps are RESTs. Every returned row satisfies validate_melody.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    scale = CORPUS_PITCHES
    rest_prob = 0.22  # per-event; with mean note length 2.5 this puts ~10% of steps at REST
    corpus = np.zeros((count, steps), dtype=np.int64)
    for i in range(count):
        idx = int(rng.integers(6, len(scale) - 6))
        t = 0
        first = True
        while t < steps:
            if not first and rng.random() < rest_prob:
                corpus[i, t] = REST
                t += 1
                continue
            if not first:
                idx = min(max(idx + int(rng.choice((-2, -1, 1, 2))), 0), len(scale) - 1)
            first = False
            duration = min(int(rng.integers(1, 5)), steps - t)
            corpus[i, t] = pitch_to_token(scale[idx])
            corpus[i, t + 1 : t + duration] = HOLD
            t += duration
    return corpus


def save_corpus(corpus: np.ndarray, path) -> None:
    """One melody per line, comma-separated integer tokens, UTF-8, LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.asarray(corpus):
            fh.write(",".join(str(int(t)) for t in row) + "\n")


def load_corpus(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        rows = [
            [int(tok) for tok in line.strip().split(",")]
            for line in fh
            if line.strip()
        ]
    if not rows:
        raise ValueError(f"empty corpus file: {path}")
    return np.asarray(rows, dtype=np.int64)


def _note_intervals(tokens: np.ndarray) -> list[tuple[int, int, int]]:
    """Melody tokens -> list of (pitch, start_step, end_step), end exclusive."""
    notes = []
    open_pitch = None
    open_start = 0
    for t, tok in enumerate(tokens.tolist()):
        if tok == HOLD:
            continue
        if open_pitch is not None:
            notes.append((open_pitch, open_start, t))
            open_pitch = None
        if tok >= 2:
            open_pitch = token_to_pitch(tok)
            open_start = t
    if open_pitch is not None:
        notes.append((open_pitch, open_start, len(tokens)))
    return notes


def _encode_vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def tokens_to_midi(tokens) -> bytes:
    """Render a melody as a type-0 Standard MIDI File.

    Division 480 ticks/quarter, one step = 120 ticks, tempo 120 BPM.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    violations = validate_melody(tokens)
    if violations:
        raise ValueError("invalid melody: " + "; ".join(violations))

    # (tick, order, bytes); note-offs sort ahead of note-ons at equal ticks
    events = [(0, 0, bytes((0xFF, 0x51, 0x03)) + TEMPO_USEC_PER_QUARTER.to_bytes(3, "big"))]
    for pitch, start, end in _note_intervals(tokens):
        events.append((start * TICKS_PER_STEP, 2, bytes((0x90, pitch, 96))))
        events.append((end * TICKS_PER_STEP, 1, bytes((0x80, pitch, 0))))
    end_tick = len(tokens) * TICKS_PER_STEP
    events.append((end_tick, 3, bytes((0xFF, 0x2F, 0x00))))
    events.sort(key=lambda e: (e[0], e[1]))

    track = bytearray()
    prev_tick = 0
    for tick, _, payload in events:
        track += _encode_vlq(tick - prev_tick)
        track += payload
        prev_tick = tick

    header = struct.pack(">4sIHHH", b"MThd", 6, 0, 1, TICKS_PER_QUARTER)
    return header + struct.pack(">4sI", b"MTrk", len(track)) + bytes(track)


class MidiFormatError(ValueError):
    """Raised for MIDI input outside the conventions of tokens_to_midi."""


def midi_to_tokens(data: bytes, steps: int = DEFAULT_STEPS) -> np.ndarray:
    """Inverse of tokens_to_midi on its image; truncates/pads to `steps` with REST."""
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiFormatError("not a MIDI file")
    hlen, fmt, ntrks, division = struct.unpack(">IHHH", data[4:14])
    if hlen != 6 or fmt != 0 or ntrks != 1:
        raise MidiFormatError("only single-track type-0 files are supported")
    if division != TICKS_PER_QUARTER:
        raise MidiFormatError(f"unsupported division {division}")
    if data[14:18] != b"MTrk":
        raise MidiFormatError("missing track chunk")
    (tlen,) = struct.unpack(">I", data[18:22])
    track = data[22 : 22 + tlen]

    pos = 0
    tick = 0
    status = 0
    open_notes: dict[int, int] = {}
    notes = []

    def read_vlq():
        nonlocal pos
        value = 0
        while True:
            b = track[pos]
            pos += 1
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value

    while pos < len(track):
        tick += read_vlq()
        b = track[pos]
        if b & 0x80:
            status = b
            pos += 1
        if status == 0xFF:
            meta = track[pos]
            pos += 1
            length = read_vlq()
            pos += length
            if meta == 0x2F:
                break
            if meta != 0x51:
                raise MidiFormatError(f"unsupported meta event 0x{meta:02x}")
            continue
        kind = status & 0xF0
        if kind == 0x90:
            pitch, vel = track[pos], track[pos + 1]
            pos += 2
            if vel > 0:
                if open_notes:
                    raise MidiFormatError("overlapping notes (polyphony) unsupported")
                open_notes[pitch] = tick
            else:
                if pitch not in open_notes:
                    raise MidiFormatError(f"note-off for silent pitch {pitch}")
                notes.append((pitch, open_notes.pop(pitch), tick))
        elif kind == 0x80:
            pitch, _vel = track[pos], track[pos + 1]
            pos += 2
            if pitch not in open_notes:
                raise MidiFormatError(f"note-off for silent pitch {pitch}")
            notes.append((pitch, open_notes.pop(pitch), tick))
        else:
            raise MidiFormatError(f"unsupported event status 0x{status:02x}")
    if open_notes:
        raise MidiFormatError("note never released")

    tokens = np.full(steps, REST, dtype=np.int64)
    for pitch, start, end in notes:
        if start % TICKS_PER_STEP or end % TICKS_PER_STEP:
            raise MidiFormatError("notes must align to the 120-tick step grid")
        s, e = start // TICKS_PER_STEP, end // TICKS_PER_STEP
        if s >= steps:
            continue
        tokens[s] = pitch_to_token(pitch)
        tokens[s + 1 : min(e, steps)] = HOLD
    return tokens


@dataclass(frozen=True)
class SynthConfig:
    """Sine-voice rendering parameters; sample_rate * step_duration must be integral."""

    sample_rate: int = 16_000
    step_duration: float = 0.125
    gain: float = 0.8
    attack_release: float = 0.010  # seconds of linear ramp at note edges

    def __post_init__(self):
        spc = self.sample_rate * self.step_duration
        if abs(spc - round(spc)) > 1e-9:
            raise ValueError("sample_rate * step_duration must be an integer")
        if not 0.0 <= self.gain <= 1.0:
            raise ValueError("gain must lie in [0, 1]")

    @property
    def samples_per_step(self) -> int:
        return round(self.sample_rate * self.step_duration)


def pitch_frequency(pitch: int) -> float:
    """Equal-tempered frequency, A4 (MIDI 69) = 440 Hz."""
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def tokens_to_wav(tokens, cfg: SynthConfig = SynthConfig()) -> bytes:
    """Render a melody as mono 16-bit PCM WAV bytes (canonical 44-byte header)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    violations = validate_melody(tokens)
    if violations:
        raise ValueError("invalid melody: " + "; ".join(violations))

    spc = cfg.samples_per_step
    signal = np.zeros(len(tokens) * spc, dtype=np.float64)
    ramp_len = int(cfg.attack_release * cfg.sample_rate)
    for pitch, start, end in _note_intervals(tokens):
        n = (end - start) * spc
        t = np.arange(n) / cfg.sample_rate
        note = np.sin(2.0 * np.pi * pitch_frequency(pitch) * t)
        edge = min(ramp_len, n // 2)
        if edge > 0:
            env = np.ones(n)
            env[:edge] = np.linspace(0.0, 1.0, edge, endpoint=False)
            env[n - edge :] = np.linspace(1.0, 0.0, edge, endpoint=False)
            note *= env
        signal[start * spc : end * spc] = note

    pcm = np.clip(np.rint(signal * cfg.gain * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(cfg.sample_rate)
        wav.writeframes(pcm.tobytes())
    return buf.getvalue()
