"""Row-major run-length coding of label maps: (class u8, run u16) entries."""
from __future__ import annotations

import numpy as np

MAX_RUN = 0xFFFF
ENTRY_BITS = 24
COUNT_BITS = 32


def encode_label_map(labels: np.ndarray) -> np.ndarray:
    """Return an (entries x 2) array of (class, run); runs longer than 65535 are split."""
    flat = np.asarray(labels).ravel()
    if flat.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if flat.min() < 0 or flat.max() > 255:
        raise ValueError("label values must fit in u8")
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    runs = np.diff(np.concatenate([starts, [flat.size]]))
    entries = []
    for cls, run in zip(flat[starts], runs):
        while run > MAX_RUN:
            entries.append((cls, MAX_RUN))
            run -= MAX_RUN
        entries.append((cls, run))
    return np.array(entries, dtype=np.int64).reshape(-1, 2)


def decode_label_map(entries: np.ndarray, shape: tuple[int, int],
                     num_classes: int | None = None) -> tuple[np.ndarray, bool]:
    """Expand runs back into an ``shape`` grid.

    Damaged entries are repaired rather than rejected: classes outside
    1..num_classes are replaced by the previous valid class, overflowing runs
    are truncated and a short map is padded with its last class. The second
    return value reports whether any repair happened.
    """
    entries = np.asarray(entries, dtype=np.int64).reshape(-1, 2)
    total = shape[0] * shape[1]
    out = np.empty(total, dtype=np.int64)
    pos, damaged, last = 0, False, 1
    for cls, run in entries:
        if num_classes is not None and not 1 <= cls <= num_classes:
            cls, damaged = last, True
        take = min(int(run), total - pos)
        if take < run:
            damaged = True
        out[pos:pos + take] = cls
        pos += take
        last = int(cls)
    if pos < total:
        out[pos:] = last
        damaged = True
    return out.reshape(shape), damaged


def label_bits_length(entries: np.ndarray) -> int:
    """Bits in the label-map segment: the u32 count plus 24 bits per entry."""
    return COUNT_BITS + ENTRY_BITS * len(entries)


def entries_to_bits(entries: np.ndarray) -> np.ndarray:
    entries = np.asarray(entries, dtype=np.int64).reshape(-1, 2)
    raw = np.zeros((len(entries), 3), dtype=np.uint8)
    raw[:, 0] = entries[:, 0]
    raw[:, 1] = entries[:, 1] & 0xFF
    raw[:, 2] = entries[:, 1] >> 8
    return np.unpackbits(raw.ravel())


def bits_to_entries(bits: np.ndarray) -> np.ndarray:
    raw = np.packbits(np.asarray(bits, dtype=np.uint8)).reshape(-1, 3).astype(np.int64)
    return np.stack([raw[:, 0], raw[:, 1] | (raw[:, 2] << 8)], axis=1)
