"""Synthetic ECG-like heartbeats in the 187-sample CSV layout.

Stand-in data for demos and tests when the public heartbeat files are not
available.  Each beat starts at an R peak, runs to the next R peak, is
min-max normalized and zero padded, mimicking the pre-segmented set.
Morphologies are loose caricatures of the five classes:

* N  regular rhythm, narrow QRS, upright T, P wave before the next beat
* S  premature (short RR), early and flattened P wave
* V  wide bizarre QRS, inverted T, no P wave, compensatory pause
* F  a blend of N and V morphology
* Q  paced: sharp pacing spike before a wide QRS
"""

import numpy as np

from nsrobust.data import SIGNAL_LENGTH, HeartbeatSet
from nsrobust.tensor import RandStream


def _bump(t, center, width, height):
    return height * np.exp(-0.5 * ((t - center) / width) ** 2)


def _beat(cls, r, length):
    """One beat as a function of sample index; ``r`` yields the random draws."""
    t = np.arange(length, dtype=np.float64)
    jitter = lambda scale: scale * r()  # noqa: E731
    if cls == 0:
        rr = 120 + jitter(20)
        qrs_w, t_h, p_h, p_off = 3.0 + jitter(0.5), 0.30 + jitter(0.06), 0.12 + jitter(0.03), 22
    elif cls == 1:
        rr = 88 + jitter(14)
        qrs_w, t_h, p_h, p_off = 3.2 + jitter(0.5), 0.28 + jitter(0.06), 0.06 + jitter(0.03), 30
    elif cls == 2:
        rr = 150 + jitter(18)
        qrs_w, t_h, p_h, p_off = 8.0 + jitter(1.5), -0.35 + jitter(0.08), 0.0, 0
    elif cls == 3:
        rr = 125 + jitter(18)
        qrs_w, t_h, p_h, p_off = 5.5 + jitter(1.2), 0.0 + jitter(0.12), 0.07 + jitter(0.03), 22
    else:
        rr = 118 + jitter(10)
        qrs_w, t_h, p_h, p_off = 6.5 + jitter(1.0), 0.25 + jitter(0.08), 0.0, 0
    rr = float(np.clip(rr, 60, length - 5))
    sig = np.zeros(length)
    # R peak at 0 and at rr; S wave just after each
    for c in (0.0, rr):
        sig += _bump(t, c, qrs_w, 1.0)
        sig += _bump(t, c + 1.6 * qrs_w, qrs_w * 0.8, -0.25 - (0.2 if cls in (2, 3) else 0))
    if cls == 4:
        sig += _bump(t, rr - 2.2 * qrs_w, 0.7, 0.9)
    sig += _bump(t, 0.38 * rr + jitter(3), 7.0 + jitter(1.5), t_h)
    if p_h:
        sig += _bump(t, rr - p_off + jitter(2), 4.0, p_h)
    sig += 0.04 * np.sin(2 * np.pi * t / (180 + jitter(30)) + jitter(3))
    end = int(min(length, rr + 6 + jitter(3)))
    seg = sig[:end]
    seg = (seg - seg.min()) / (seg.max() - seg.min())
    out = np.zeros(length)
    out[:end] = seg
    return out


def synthetic_heartbeats(counts, seed=0, noise=0.02, length=SIGNAL_LENGTH):
    """Heartbeats with ``counts[c]`` rows of class ``c``, shuffled deterministically."""
    stream = RandStream(seed, 77)
    total = int(sum(counts))
    draws = iter(stream.normal(0.0, 1.0, (total * 16,), dtype=np.float64))
    rows, labels = [], []
    for cls, k in enumerate(counts):
        for _ in range(int(k)):
            rows.append(_beat(cls, lambda: next(draws), length))
            labels.append(cls)
    signals = np.array(rows).reshape(total, length)
    signals += noise * stream.normal(0.0, 1.0, signals.shape, dtype=np.float64) * (signals > 0)
    signals = np.clip(signals, 0.0, 1.0)
    order = stream.permutation(total)
    return HeartbeatSet(signals[order], np.array(labels, dtype=np.int64)[order])
