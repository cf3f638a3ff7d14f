"""Synthetic Speech Commands-style trees for tests."""

from pathlib import Path

import numpy as np

from sinckws.data import encode_wav

RATE = 16000


def tone_clip(rng, lo_hz, hi_hz, length=RATE):
    t = np.arange(length) / RATE
    freq = rng.uniform(lo_hz, hi_hz)
    dur = rng.uniform(0.35, 0.6)
    onset = rng.uniform(0.05, 0.95 - dur)
    env = np.zeros(length)
    a, b = int(onset * RATE), int((onset + dur) * RATE)
    env[a:b] = np.hanning(b - a)
    x = rng.uniform(0.3, 0.6) * env * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return x + rng.normal(0, 0.01, length)


KEYWORD_BANDS = {"yes": (500, 800), "no": (2500, 3500), "up": (1200, 1600), "down": (4500, 5500)}


def write_tree(root, keywords=("yes", "no"), n_train=20, n_val=4, n_test=2, extra=(), seed=0,
               noise_seconds=5):
    """Write a small dataset; ``extra`` keywords become ``unknown`` words."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    val, test = [], []
    for kw in list(keywords) + list(extra):
        lo, hi = KEYWORD_BANDS.get(kw, (6000, 7000))
        (root / kw).mkdir(parents=True, exist_ok=True)
        for i in range(n_train + n_val + n_test):
            name = f"{kw}/{i:04d}_nohash_0.wav"
            (root / name).write_bytes(encode_wav(tone_clip(rng, lo, hi)))
            if i >= n_train + n_val:
                test.append(name)
            elif i >= n_train:
                val.append(name)
    (root / "_background_noise_").mkdir(parents=True, exist_ok=True)
    noise = rng.normal(0, 0.05, RATE * noise_seconds)
    (root / "_background_noise_" / "white_noise.wav").write_bytes(encode_wav(noise))
    (root / "validation_list.txt").write_text("\n".join(val) + "\n")
    (root / "testing_list.txt").write_text("\n".join(test) + "\n")
    return root
