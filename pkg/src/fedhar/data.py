"""Synthetic multimodal activity data and privacy-level client partitions.

Each raw record is one activity window seen by every modality at once
(subject, room, label, one feature vector per modality). Heterogeneity comes
from three sources whose strengths are configured separately:

* a fixed random linear transform per modality,
* an additive mean shift per (subject, modality),
* an additive mean shift per (room, modality), plus a skewed label
  distribution in room 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEVELS = ("centralised", "subj", "subj+env", "subj+env+mod")
FUSIONS = ("fused", "separated")


@dataclass
class Sample:
    features: np.ndarray  # (slots, width); absent slots hold zeros
    modality_mask: np.ndarray  # (slots,) bool
    label: int
    subject: int
    room: int
    modality_id: int = 0  # 1-based source modality when separated, 0 when fused

    @property
    def is_separated(self) -> bool:
        return int(self.modality_mask.sum()) == 1

    def split(self) -> list["Sample"]:
        """One single-modality sample per present slot, in slot order.

        Every separated sample is written into the first slot, so all
        modalities share one padded input position and only ``modality_id``
        records where the data came from.
        """
        out = []
        for slot in np.flatnonzero(self.modality_mask):
            feats = np.zeros_like(self.features)
            feats[0] = self.features[slot]
            mask = np.zeros_like(self.modality_mask)
            mask[0] = True
            out.append(Sample(feats, mask, self.label, self.subject, self.room, int(slot) + 1))
        return out


@dataclass(frozen=True)
class GeneratorConfig:
    feature_width: int = 8
    num_modalities: int = 3
    num_classes: int = 6
    num_subjects: int = 6
    num_rooms: int = 2
    class_signal: float = 0.6
    noise_scale: float = 1.0
    subject_shift_scale: float = 0.2
    room_shift_scale: float = 0.4
    modality_transform_scale: float = 4.0
    room_label_skew: float = 0.5
    samples_per_cell: int = 80

    def __post_init__(self):
        for name in ("feature_width", "num_modalities", "num_classes", "num_subjects",
                     "num_rooms", "samples_per_cell"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("class_signal", "noise_scale", "subject_shift_scale", "room_shift_scale",
                     "modality_transform_scale", "room_label_skew"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def room_label_probs(cfg: GeneratorConfig, room: int) -> np.ndarray:
    """Room 1 is uniform over classes; later rooms decay as exp(-skew * class)."""
    if room == 1:
        logits = np.zeros(cfg.num_classes)
    else:
        logits = -cfg.room_label_skew * np.arange(cfg.num_classes)
    p = np.exp(logits)
    return p / p.sum()


def generate(cfg: GeneratorConfig, seed: int) -> list[Sample]:
    """Fused samples (every modality slot present), ordered by subject then room."""
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    w, m = cfg.feature_width, cfg.num_modalities
    class_means = cfg.class_signal * rng.standard_normal((cfg.num_classes, w))
    transforms = np.eye(w) + cfg.modality_transform_scale * rng.standard_normal((m, w, w)) / np.sqrt(w)
    subject_shift = cfg.subject_shift_scale * rng.standard_normal((cfg.num_subjects, m, w))
    room_shift = cfg.room_shift_scale * rng.standard_normal((cfg.num_rooms, m, w))

    samples = []
    for subject in range(1, cfg.num_subjects + 1):
        for room in range(1, cfg.num_rooms + 1):
            n = cfg.samples_per_cell
            labels = rng.choice(cfg.num_classes, size=n, p=room_label_probs(cfg, room))
            clean = np.einsum("mij,nj->nmi", transforms, class_means[labels])
            noise = cfg.noise_scale * rng.standard_normal((n, m, w))
            feats = clean + subject_shift[subject - 1] + room_shift[room - 1] + noise
            for k in range(n):
                samples.append(Sample(feats[k], np.ones(m, dtype=bool), int(labels[k]), subject, room))
    return samples


@dataclass(frozen=True)
class PartitionSpec:
    level: str
    fusion: str = "separated"
    holdout_subject: int = 6

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown privacy level {self.level!r}; expected one of {LEVELS}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSIONS}")
        if self.level == "subj+env+mod" and self.fusion != "separated":
            raise ValueError("subj+env+mod partitioning requires separated modalities")

    @property
    def label(self) -> str:
        return f"{self.level}({'F' if self.fusion == 'fused' else 'S'})"


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``(features, mask, labels)`` for a list of samples."""
    feats = np.stack([s.features for s in samples])
    mask = np.stack([s.modality_mask for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return feats, mask, labels


@dataclass
class ClientDataset:
    client_id: str
    samples: list[Sample]
    key: tuple[int, ...] = ()
    _arrays: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.samples:
            raise ValueError(f"client {self.client_id} has no samples")

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._arrays is None:
            self._arrays = stack(self.samples)
        return self._arrays

    @property
    def modalities(self) -> set[int]:
        return {s.modality_id for s in self.samples}


def _client_id(key: tuple[int, ...]) -> str:
    if not key:
        return "all"
    return "-".join(f"{p}{v}" for p, v in zip("srm", key))


def most_balanced_subject(samples: list[Sample]) -> int:
    """Subject whose samples are most evenly split between two rooms (lowest index on ties)."""
    counts: dict[int, dict[int, int]] = {}
    for s in samples:
        counts.setdefault(s.subject, {}).setdefault(s.room, 0)
        counts[s.subject][s.room] += 1
    best, best_gap = None, None
    for subject in sorted(counts):
        rooms = counts[subject]
        if len(rooms) < 2:
            continue
        total = sum(rooms.values())
        gap = (max(rooms.values()) - min(rooms.values())) / total
        if best_gap is None or gap < best_gap:
            best, best_gap = subject, gap
    if best is None:
        raise ValueError("no training subject appears in more than one room")
    return best


def partition(samples: list[Sample], spec: PartitionSpec) -> tuple[list[ClientDataset], list[Sample]]:
    """Group non-holdout samples into clients at ``spec.level``; holdout subject is the test set.

    Clients are ordered by (subject, room, modality).
    """
    subjects = {s.subject for s in samples}
    if spec.holdout_subject not in subjects:
        raise ValueError(f"holdout subject {spec.holdout_subject} has no samples")
    if spec.fusion == "fused" and any(s.is_separated and len(s.modality_mask) > 1 for s in samples):
        raise ValueError("fused partitioning needs samples carrying every modality slot")

    if spec.fusion == "separated":
        expanded = [t for s in samples for t in (s.split() if not s.is_separated else [s])]
    else:
        expanded = list(samples)
    test = [s for s in expanded if s.subject == spec.holdout_subject]
    train = [s for s in expanded if s.subject != spec.holdout_subject]

    split_subject = most_balanced_subject(train) if spec.level == "subj" else None

    def key_of(s: Sample) -> tuple[int, ...]:
        if spec.level == "centralised":
            return ()
        if spec.level == "subj":
            return (s.subject, s.room) if s.subject == split_subject else (s.subject,)
        if spec.level == "subj+env":
            return (s.subject, s.room)
        return (s.subject, s.room, s.modality_id)

    groups: dict[tuple[int, ...], list[Sample]] = {}
    for s in train:
        groups.setdefault(key_of(s), []).append(s)
    clients = [ClientDataset(_client_id(k), groups[k], k) for k in sorted(groups)]
    return clients, test


def partition_stats(clients: list[ClientDataset]) -> dict:
    """Mean and population std of per-client sample counts."""
    if not clients:
        raise ValueError("empty partition")
    sizes = np.array([len(c) for c in clients], dtype=float)
    return {"mean": float(sizes.mean()), "std": float(sizes.std()), "count": len(clients),
            "total": int(sizes.sum())}


def write_manifest(samples: list[Sample], path: str | Path) -> None:
    """One JSON record per line; absent modality slots are written as null."""
    with open(path, "w") as fh:
        for s in samples:
            rec = {
                "subject": s.subject,
                "room": s.room,
                "modality": s.modality_id,
                "label": s.label,
                "features": [row.tolist() if present else None
                             for row, present in zip(s.features, s.modality_mask)],
            }
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path: str | Path) -> list[Sample]:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                slots = rec["features"]
                width = next(len(r) for r in slots if r is not None)
                feats = np.array([r if r is not None else [0.0] * width for r in slots], dtype=float)
                mask = np.array([r is not None for r in slots])
                samples.append(Sample(feats, mask, int(rec["label"]), int(rec["subject"]),
                                      int(rec["room"]), int(rec.get("modality", 0))))
            except (KeyError, TypeError, ValueError, StopIteration) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest record ({exc})") from exc
    return samples
