"""File formats: waveforms, spectrogram CSV, checkpoints, manifests and CSV logs."""

from __future__ import annotations

import csv
import json
import struct
import wave
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, List, Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .sigproc import AcousticBuffer, Spectrogram

WAVEFORM_MAGIC = b"EFLB"
CHECKPOINT_MAGIC = b"EFCK"
CHECKPOINT_VERSION = 1


def _target(path) -> Path:
    """``path`` as a Path, with its parent directory created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# waveforms --------------------------------------------------------------

def write_waveform(path, buf: AcousticBuffer) -> Path:
    """Header ``EFLB | u32 rate | u32 count`` (+4 reserved bytes), then float32 LE samples."""
    path = _target(path)
    samples = np.asarray(buf.samples, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(WAVEFORM_MAGIC + struct.pack("<III", int(round(buf.sample_rate)), samples.size, 0))
        fh.write(samples.tobytes())
    return path


def read_waveform(path) -> AcousticBuffer:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != WAVEFORM_MAGIC:
        raise ShapeError(f"{path}: not an EFLB waveform file")
    rate, count, _ = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * count:
        raise ShapeError(f"{path}: header says {count} samples, body holds {len(body) // 4}")
    samples = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return AcousticBuffer(samples, float(rate), origin="file")


def read_wav(path) -> AcousticBuffer:
    """16-bit PCM WAV to a mono buffer in [-1, 1); channels are averaged."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ShapeError(f"{path}: only 16-bit PCM WAV is supported")
        n_ch, rate = wf.getnchannels(), wf.getframerate()
        data = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    x = data.reshape(-1, n_ch).astype(np.float64).mean(axis=1) / 32768.0
    return AcousticBuffer(x, float(rate), origin="file")


def write_wav(path, buf: AcousticBuffer) -> Path:
    path = _target(path)
    pcm = np.clip(np.round(np.asarray(buf.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(round(buf.sample_rate)))
        wf.writeframes(pcm.tobytes())
    return path


def load_recording(path) -> AcousticBuffer:
    return read_wav(path) if str(path).lower().endswith(".wav") else read_waveform(path)


# spectrograms -----------------------------------------------------------

def write_spectrogram_csv(path, spec: Spectrogram) -> Path:
    """Rows are frequency bins, columns time bins; first row/column hold the axes."""
    path = _target(path)
    m = spec.magnitudes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{spec.window_len}:{spec.hop}"] + [repr(float(t)) for t in spec.time_axis])
        for f, row in zip(spec.freq_axis, m):
            w.writerow([repr(float(f))] + [repr(float(v)) for v in row])
    return path


def read_spectrogram_csv(path) -> Spectrogram:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ShapeError(f"{path}: spectrogram CSV needs an axis row and at least one bin")
    corner = rows[0][0]
    window_len, hop = (int(v) for v in corner.split(":")) if ":" in corner else (512, 128)
    time_axis = np.array([float(v) for v in rows[0][1:]])
    freq_axis = np.array([float(r[0]) for r in rows[1:]])
    mags = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return Spectrogram(mags, freq_axis, time_axis, window_len, hop)


# checkpoints ------------------------------------------------------------

def write_checkpoint(path, state: Mapping[str, np.ndarray]) -> Path:
    """``EFCK | u32 version`` then per tensor: name, dims, float64 LE values."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    path = _target(path)
    path.write_bytes(b"".join(parts))
    return path


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: not an EFCK checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, OrderedDict()
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise ShapeError(f"{path}: truncated checkpoint") from exc
    return out


# manifests and logs -----------------------------------------------------

def write_jsonl(path, rows: Iterable[Mapping]) -> Path:
    path = _target(path)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=False) + "\n")
    return path


def read_jsonl(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, rows: List[Mapping], fields=None) -> Path:
    path = _target(path)
    rows = list(rows)
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
