"""Synthetic heterogeneous driving-intention clients.

Each frame is ``front | rear | cabin``, every block ``feature_dim`` wide.
Prototypes are unit basis vectors inside their block:

=========  ==========================  ==================================
block      basis index                 meaning
=========  ==========================  ==================================
front      0 / 1                       lead gap near / far (label-free)
rear       0 / 1                       adjacent lane clear / occupied
cabin      0, 1, 2                     gesture prototypes G0, G1, G2
=========  ==========================  ==================================

A client's ``permutation`` maps intention class -> gesture prototype; a
lane change in direction ``c`` (1 left, 2 right) shows
``amplitude * G[permutation[c]]`` in the cabin block.  ``permutation[0]``
is the prototype a client never uses.

Scenarios:

* ``LK_with_FOP``  lane-keep, front observation: no gesture, rear clear
* ``LC_with_SOP``  lane-change left/right: G[perm[label]], rear clear
* ``LK_with_SOP``  lane-keep, false positive: gesture of a random
  lane-change direction, rear occupied

The rear block is the only thing separating a true lane change from a
false-positive lane-keep.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .memory import BLOCKS

LK_FOP = "LK_with_FOP"
LC_SOP = "LC_with_SOP"
LK_SOP = "LK_with_SOP"
SCENARIOS = (LC_SOP, LK_FOP, LK_SOP)

REAR_CLEAR, REAR_OCCUPIED = 0, 1
FRONT_NEAR, FRONT_FAR = 0, 1

FORMAT_HEADER = "# pfl-lstr dataset v1"


@dataclass(frozen=True)
class ClientStyle:
    client_id: int
    false_positive_rate: float = 0.3
    amplitude: float = 1.0
    permutation: tuple = (0, 1, 2)
    noise: float = 0.1
    style_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.false_positive_rate <= 1.0:
            raise ValueError(f"false_positive_rate must lie in [0, 1]: {self.false_positive_rate}")
        if self.amplitude <= 0:
            raise ValueError(f"amplitude must be positive: {self.amplitude}")
        if self.noise < 0:
            raise ValueError(f"noise must be non-negative: {self.noise}")
        if sorted(self.permutation) != [0, 1, 2]:
            raise ValueError(f"permutation must reorder (0, 1, 2): {self.permutation}")


def random_style(client_id: int, seed: int, noise: float = 0.1) -> ClientStyle:
    rng = np.random.default_rng([seed, client_id])
    return ClientStyle(
        client_id=client_id,
        false_positive_rate=float(rng.uniform(0.1, 0.5)),
        amplitude=float(rng.uniform(0.8, 1.2)),
        permutation=tuple(int(i) for i in rng.permutation(3)),
        noise=noise,
        style_seed=seed,
    )


@dataclass
class LabeledSequence:
    frames: np.ndarray  # (T, 3 * feature_dim)
    label: int
    scenario: str


@dataclass
class ClientDataset:
    sequences: list
    feature_dim: int
    fps: int = 4
    client_id: int = 0
    train_idx: list = field(default_factory=list)
    test_idx: list = field(default_factory=list)

    def __post_init__(self):
        if not self.train_idx and not self.test_idx:
            self.train_idx = list(range(len(self.sequences)))

    def __len__(self):
        return len(self.sequences)

    @property
    def train(self) -> list:
        return [self.sequences[i] for i in self.train_idx]

    @property
    def test(self) -> list:
        return [self.sequences[i] for i in self.test_idx]

    def fingerprint(self) -> str:
        """Hash of contents and split, so callers can prove two runs saw the same data."""
        h = hashlib.sha256()
        h.update(f"{self.client_id}:{self.feature_dim}:{self.train_idx}:{self.test_idx}".encode())
        for s in self.sequences:
            h.update(f"{s.label}{s.scenario}".encode())
            h.update(np.ascontiguousarray(s.frames).tobytes())
        return h.hexdigest()[:16]


def block_slice(block: str, feature_dim: int) -> slice:
    i = BLOCKS.index(block)
    return slice(i * feature_dim, (i + 1) * feature_dim)


def prototype_frame(style: ClientStyle, feature_dim: int, scenario: str, label: int,
                    gesture_class: int, front: int) -> np.ndarray:
    """Noiseless frame for one episode; ``gesture_class`` 0 means no gesture."""
    if feature_dim < 3:
        raise ValueError("feature_dim must be >= 3 to hold three gesture prototypes")
    x = np.zeros(3 * feature_dim)
    x[block_slice("front", feature_dim).start + front] = 1.0
    rear = REAR_OCCUPIED if scenario == LK_SOP else REAR_CLEAR
    x[block_slice("rear", feature_dim).start + rear] = 1.0
    if gesture_class:
        x[block_slice("cabin", feature_dim).start + style.permutation[gesture_class]] = style.amplitude
    return x


def generate_client_dataset(style: ClientStyle, n_sequences: int, seed: int,
                            feature_dim: int = 16, length: int = 60, fps: int = 4) -> ClientDataset:
    """Balanced labels; exactly ``round(fp_rate * n_lane_keep)`` lane-keeps are false positives."""
    if n_sequences < 3:
        raise ValueError("need at least 3 sequences so every class is reachable")
    if length < 1:
        raise ValueError("sequence length must be positive")
    rng = np.random.default_rng([seed, style.client_id, style.style_seed])
    labels = rng.permutation(np.arange(n_sequences) % 3)
    lk = np.flatnonzero(labels == 0)
    n_fp = int(round(style.false_positive_rate * len(lk)))
    fp = set(rng.choice(lk, size=n_fp, replace=False).tolist())
    sequences = []
    for i, label in enumerate(labels):
        label = int(label)
        if label != 0:
            scenario, gesture = LC_SOP, label
        elif i in fp:
            scenario, gesture = LK_SOP, int(rng.integers(1, 3))
        else:
            scenario, gesture = LK_FOP, 0
        front = int(rng.integers(0, 2))
        base = prototype_frame(style, feature_dim, scenario, label, gesture, front)
        frames = base + style.noise * rng.standard_normal((length, base.size))
        sequences.append(LabeledSequence(frames, label, scenario))
    return ClientDataset(sequences, feature_dim, fps, style.client_id)


def split_train_test(ds: ClientDataset, ratio: float, seed: int) -> ClientDataset:
    """Stratified by scenario tag; ``ratio`` is the train fraction."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1): {ratio}")
    rng = np.random.default_rng([seed, ds.client_id, 7919])
    train, test = [], []
    for tag in SCENARIOS:
        idx = [i for i, s in enumerate(ds.sequences) if s.scenario == tag]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        k = int(round(ratio * len(idx)))
        train += idx[:k]
        test += idx[k:]
    return replace(ds, train_idx=sorted(train), test_idx=sorted(test))


def ablate_rear_view(ds: ClientDataset) -> ClientDataset:
    """Copy of ``ds`` with the rear block zeroed in every frame."""
    rear = block_slice("rear", ds.feature_dim)
    out = []
    for s in ds.sequences:
        frames = s.frames.copy()
        frames[:, rear] = 0.0
        out.append(LabeledSequence(frames, s.label, s.scenario))
    return replace(ds, sequences=out, train_idx=list(ds.train_idx), test_idx=list(ds.test_idx))


def oracle_classify(style: ClientStyle, frame: np.ndarray, feature_dim: int) -> int:
    """Bayes-optimal label for a noiseless frame under ``style``."""
    rear = frame[block_slice("rear", feature_dim)]
    if rear[REAR_OCCUPIED] > rear[REAR_CLEAR]:
        return 0
    cabin = frame[block_slice("cabin", feature_dim)][:3]
    gesture = int(np.argmax(cabin))
    if cabin[gesture] < 0.5 * style.amplitude or gesture == style.permutation[0]:
        return 0
    return style.permutation.index(gesture)


# ------------------------------------------------------------ benchmarks

def benchmark_styles(noise: float = 0.1) -> list[ClientStyle]:
    """Three drivers; driver 0 swaps the lane-change gestures and has the most false positives."""
    return [
        ClientStyle(0, false_positive_rate=0.5, amplitude=1.0, permutation=(0, 2, 1), noise=noise),
        ClientStyle(1, false_positive_rate=0.3, amplitude=1.2, permutation=(0, 1, 2), noise=noise),
        ClientStyle(2, false_positive_rate=0.25, amplitude=0.8, permutation=(0, 1, 2), noise=noise),
    ]


MOST_HETEROGENEOUS_CLIENT = 0
HIGH_FP_CLIENT = 0


def newcomer_style(noise: float = 0.1) -> ClientStyle:
    return ClientStyle(3, false_positive_rate=0.3, amplitude=1.1, permutation=(1, 2, 0), noise=noise)


def make_clients(styles, n_sequences: int, seed: int, feature_dim: int, length: int,
                 fps: int, train_ratio: float = 0.5) -> list[ClientDataset]:
    return [
        split_train_test(
            generate_client_dataset(s, n_sequences, seed, feature_dim, length, fps),
            train_ratio, seed,
        )
        for s in styles
    ]


# ------------------------------------------------------------------ file I/O

class DatasetFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def save_dataset(ds: ClientDataset, path) -> None:
    """Write the text format read by :func:`load_dataset`.

    ::

        # pfl-lstr dataset v1
        feature_dim <int>
        fps <int>
        blocks front rear cabin
        client <int>
        sequences <int>
        train <idx ...>
        test <idx ...>
        sequence <scenario> <label> <n_frames>
        <n_frames rows of 3*feature_dim floats, 17 significant digits>
        ...
    """
    lines = [
        FORMAT_HEADER,
        f"feature_dim {ds.feature_dim}",
        f"fps {ds.fps}",
        "blocks " + " ".join(BLOCKS),
        f"client {ds.client_id}",
        f"sequences {len(ds.sequences)}",
        "train " + " ".join(map(str, ds.train_idx)),
        "test " + " ".join(map(str, ds.test_idx)),
    ]
    for s in ds.sequences:
        lines.append(f"sequence {s.scenario} {s.label} {len(s.frames)}")
        lines.extend(" ".join(f"{v:.17g}" for v in row) for row in s.frames)
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> ClientDataset:
    raw = Path(path).read_text().splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(raw) and not raw[pos].strip():
            pos += 1
        if pos >= len(raw):
            raise DatasetFormatError(pos + 1, "unexpected end of file")
        pos += 1
        return pos, raw[pos - 1].split()

    def keyed(key, count=None):
        ln, parts = next_line()
        if not parts or parts[0] != key:
            raise DatasetFormatError(ln, f"expected '{key}'")
        if count is not None and len(parts) != count + 1:
            raise DatasetFormatError(ln, f"'{key}' takes {count} value(s)")
        return ln, parts[1:]

    def ints(ln, vals):
        try:
            return [int(v) for v in vals]
        except ValueError as exc:
            raise DatasetFormatError(ln, str(exc)) from None

    ln, parts = next_line()
    if " ".join(parts) != FORMAT_HEADER:
        raise DatasetFormatError(ln, f"missing header {FORMAT_HEADER!r}")
    ln, v = keyed("feature_dim", 1)
    (feature_dim,) = ints(ln, v)
    ln, v = keyed("fps", 1)
    (fps,) = ints(ln, v)
    ln, v = keyed("blocks")
    if tuple(v) != BLOCKS:
        raise DatasetFormatError(ln, f"blocks must be {' '.join(BLOCKS)}")
    ln, v = keyed("client", 1)
    (client,) = ints(ln, v)
    ln, v = keyed("sequences", 1)
    (n,) = ints(ln, v)
    train_ln, v = keyed("train")
    train = ints(train_ln, v)
    test_ln, v = keyed("test")
    test = ints(test_ln, v)
    width = 3 * feature_dim
    sequences = []
    for _ in range(n):
        ln, v = keyed("sequence", 3)
        scenario = v[0]
        if scenario not in SCENARIOS:
            raise DatasetFormatError(ln, f"unknown scenario {scenario!r}")
        label, n_frames = ints(ln, v[1:])
        if label not in (0, 1, 2):
            raise DatasetFormatError(ln, f"label {label} not in 0..2")
        rows = []
        for _ in range(n_frames):
            ln, vals = next_line()
            if len(vals) != width:
                raise DatasetFormatError(ln, f"expected {width} values, got {len(vals)}")
            try:
                rows.append([float(x) for x in vals])
            except ValueError as exc:
                raise DatasetFormatError(ln, str(exc)) from None
        sequences.append(LabeledSequence(np.array(rows).reshape(n_frames, width), label, scenario))
    while pos < len(raw):
        if raw[pos].strip():
            raise DatasetFormatError(pos + 1, "trailing content after last sequence")
        pos += 1
    for ln, idx in ((train_ln, train), (test_ln, test)):
        if any(i < 0 or i >= n for i in idx):
            raise DatasetFormatError(ln, "split index out of range")
    if set(train) & set(test):
        raise DatasetFormatError(test_ln, "train and test splits overlap")
    return ClientDataset(sequences, feature_dim, fps, client, train, test)
