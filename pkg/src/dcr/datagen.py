"""Synthetic multimodal emotion data with controllable modality conflicts.

Each clean sample is emitted from one latent emotion class: every modality
observes that class's prototype vector under a per-sample temporal envelope
plus Gaussian noise of std ``1 / snr``. Conflicts are then injected into one
modality: *benign* ambiguates it toward the neutral prototype, *severe*
regenerates it from a prototype of the opposite polarity.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable

import numpy as np

MODALITIES = ("T", "A", "V")
POLARITIES = ("negative", "neutral", "positive")
CONFLICT_CLASSES = ("none", "benign", "severe")
POLARITY_VALUE = {"negative": -1.0, "neutral": 0.0, "positive": 1.0}
OPPOSITE = {"negative": "positive", "positive": "negative"}

MAGIC = b"DCRDATA1"


class DatasetFormatError(ValueError):
    """Malformed dataset file; carries the byte offset and field that failed."""

    def __init__(self, offset: int, field_name: str, detail: str = ""):
        self.offset, self.field = offset, field_name
        msg = f"parse error at byte {offset} reading {field_name!r}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class IntegrityError(ValueError):
    pass


def default_polarity_table(num_classes: int) -> list[str]:
    if num_classes == 3:
        return ["negative", "neutral", "positive"]
    if num_classes == 7:
        return ["negative"] * 3 + ["neutral"] + ["positive"] * 3
    if num_classes == 2:
        return ["negative", "positive"]
    raise ValueError(f"no default polarity table for C={num_classes}; pass one explicitly")


@dataclass
class DatasetManifest:
    num_classes: int = 3
    polarity_table: list[str] | None = None
    seq_lengths: dict[str, int] = field(default_factory=lambda: {"T": 16, "A": 32, "V": 48})
    raw_dims: dict[str, int] = field(default_factory=lambda: {"T": 24, "A": 16, "V": 20})
    mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    snr: dict[str, float] = field(default_factory=lambda: {"T": 1.5, "A": 0.25, "V": 0.25})
    envelope_base: float = 0.4
    # Which modality a conflict lands on, as weights over (T, A, V). Text is the
    # dominant modality, so benign edits mostly hit A/V and severe flips mostly hit T.
    benign_targets: tuple[float, float, float] = (0.1, 0.45, 0.45)
    severe_targets: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # Strength of a class-independent incongruity pattern added to the
    # non-target modalities of severe samples (0 disables it).
    incongruity_cue: float = 3.0
    seed: int = 0
    prototypes: dict[str, list[list[float]]] | None = None
    cue_vectors: dict[str, list[float]] | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.polarity_table is None:
            self.polarity_table = default_polarity_table(self.num_classes)
        self.polarity_table = list(self.polarity_table)
        self.mix = tuple(float(m) for m in self.mix)
        self.benign_targets = tuple(float(w) for w in self.benign_targets)
        self.severe_targets = tuple(float(w) for w in self.severe_targets)
        if len(self.polarity_table) != self.num_classes:
            raise ValueError("polarity table must cover every class")
        if any(p not in POLARITIES for p in self.polarity_table):
            raise ValueError(f"unknown polarity in {self.polarity_table}")
        if len(self.mix) != 3 or min(self.mix) < 0 or abs(sum(self.mix) - 1.0) > 1e-9:
            raise ValueError(f"conflict mix must be 3 non-negative weights summing to 1, got {self.mix}")
        for m in MODALITIES:
            if self.seq_lengths.get(m, 0) < 1 or self.raw_dims.get(m, 0) < 1:
                raise ValueError(f"modality {m} needs positive length and dim")
            if self.snr.get(m, -1) <= 0:
                raise ValueError(f"modality {m} needs snr > 0")
        if self.prototypes is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xC1A55]))
            protos = {}
            for m in MODALITIES:
                v = rng.standard_normal((self.num_classes, self.raw_dims[m]))
                protos[m] = (v / np.linalg.norm(v, axis=1, keepdims=True)).tolist()
            self.prototypes = protos
        if self.cue_vectors is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xC0E]))
            cues = {}
            for m in MODALITIES:
                v = rng.standard_normal(self.raw_dims[m])
                cues[m] = (v / np.linalg.norm(v)).tolist()
            self.cue_vectors = cues

    def polarity(self, class_index: int) -> str:
        return self.polarity_table[class_index]

    def classes_with(self, polarity: str) -> list[int]:
        return [c for c, p in enumerate(self.polarity_table) if p == polarity]

    def prototype(self, modality: str, class_index: int) -> np.ndarray:
        return np.asarray(self.prototypes[modality][class_index], dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mix"] = list(self.mix)
        d["benign_targets"] = list(self.benign_targets)
        d["severe_targets"] = list(self.severe_targets)
        return d

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        for key in ("mix", "benign_targets", "severe_targets"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModalitySignal:
    modality: str
    sequence: np.ndarray  # (L_raw, d_raw)
    snr: float

    def __eq__(self, other):
        return (
            isinstance(other, ModalitySignal)
            and self.modality == other.modality
            and self.snr == other.snr
            and self.sequence.shape == other.sequence.shape
            and self.sequence.tobytes() == other.sequence.tobytes()
        )


@dataclass
class Sample:
    id: str
    signals: dict[str, ModalitySignal]
    unimodal_labels: dict[str, int]
    multimodal_label: int
    conflict_class: str = "none"
    conflict_modality: str | None = None

    def copy(self) -> "Sample":
        return Sample(
            id=self.id,
            signals={m: ModalitySignal(s.modality, s.sequence.copy(), s.snr) for m, s in self.signals.items()},
            unimodal_labels=dict(self.unimodal_labels),
            multimodal_label=self.multimodal_label,
            conflict_class=self.conflict_class,
            conflict_modality=self.conflict_modality,
        )


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list[Sample]
    splits: dict[str, list[str]]

    def split(self, name: str) -> list[Sample]:
        by_id = {s.id: s for s in self.samples}
        return [by_id[i] for i in self.splits[name]]


# --- conflict taxonomy -------------------------------------------------------

def classify_polarities(unimodal: Iterable[str], multimodal: str) -> str:
    unimodal = list(unimodal)
    for p in unimodal:
        if p != "neutral" and multimodal != "neutral" and p != multimodal:
            return "severe"
    if any(p != multimodal for p in unimodal):
        return "benign"
    return "none"


def classify_conflict(unimodal_labels: dict[str, int], multimodal_label: int, manifest: DatasetManifest) -> str:
    """Heuristic severity: severe iff some unimodal polarity strictly opposes the
    multimodal one (both non-neutral); benign iff polarities merely differ."""
    return classify_polarities(
        (manifest.polarity(unimodal_labels[m]) for m in MODALITIES),
        manifest.polarity(multimodal_label),
    )


# --- emission ----------------------------------------------------------------

def _envelope(length: int, base: float, rng: np.random.Generator) -> np.ndarray:
    center = rng.uniform(0, length)
    width = max(length / 6.0, 1.0)
    t = np.arange(length)
    return base + np.exp(-0.5 * ((t - center) / width) ** 2)


def emit(manifest: DatasetManifest, modality: str, class_index: int, rng: np.random.Generator,
         noise: bool = True) -> np.ndarray:
    length = manifest.seq_lengths[modality]
    env = _envelope(length, manifest.envelope_base, rng)
    seq = env[:, None] * manifest.prototype(modality, class_index)[None, :]
    if noise:
        seq = seq + rng.standard_normal(seq.shape) / manifest.snr[modality]
    return seq


def make_clean_sample(manifest: DatasetManifest, sample_id: str, label: int, rng: np.random.Generator) -> Sample:
    signals = {m: ModalitySignal(m, emit(manifest, m, label, rng), manifest.snr[m]) for m in MODALITIES}
    return Sample(sample_id, signals, {m: label for m in MODALITIES}, label)


def inject_conflict(sample: Sample, kind: str, target: str, rng: np.random.Generator,
                    manifest: DatasetManifest) -> Sample:
    """Return a copy of a clean ``sample`` with a ``kind`` conflict on ``target``.

    benign: the target sequence is blended toward a neutral trajectory with a
    factor drawn from [0.5, 0.9] and relabelled neutral. For a neutral
    multimodal label there is nothing to ambiguate toward, so the blend goes
    toward a random non-neutral prototype instead (still a non-contradicting
    disagreement).
    severe: the target sequence is regenerated from an opposite-polarity class;
    the other modalities additionally receive the manifest's incongruity cue.
    """
    if sample.conflict_class != "none":
        raise ValueError(f"sample {sample.id} already carries a {sample.conflict_class} conflict")
    if kind not in ("benign", "severe"):
        raise ValueError(f"unknown conflict kind {kind!r}")
    if target not in MODALITIES:
        raise ValueError(f"unknown modality {target!r}")
    out = sample.copy()
    m_pol = manifest.polarity(sample.multimodal_label)
    sig = out.signals[target]
    if kind == "benign":
        if m_pol == "neutral":
            choices = [c for c, p in enumerate(manifest.polarity_table) if p != "neutral"]
        else:
            choices = manifest.classes_with("neutral")
            if not choices:
                raise ValueError("benign conflict needs a neutral class in the polarity table")
        new_label = int(choices[rng.integers(len(choices))])
        blend = rng.uniform(0.5, 0.9)
        toward = emit(manifest, target, new_label, rng, noise=False)
        sig.sequence = (1.0 - blend) * sig.sequence + blend * toward
    else:
        if m_pol == "neutral":
            raise ValueError("severe conflict requires a non-neutral multimodal label")
        choices = manifest.classes_with(OPPOSITE[m_pol])
        if not choices:
            raise ValueError(f"no class with polarity {OPPOSITE[m_pol]}")
        new_label = int(choices[rng.integers(len(choices))])
        sig.sequence = emit(manifest, target, new_label, rng)
        if manifest.incongruity_cue:
            for m in MODALITIES:
                if m != target:
                    other = out.signals[m]
                    env = _envelope(manifest.seq_lengths[m], manifest.envelope_base, rng)
                    cue = np.asarray(manifest.cue_vectors[m])
                    other.sequence = other.sequence + manifest.incongruity_cue * env[:, None] * cue[None, :]
    out.unimodal_labels[target] = new_label
    out.conflict_class = kind
    out.conflict_modality = target
    return out


def _split_pattern(position: int) -> str:
    return ("train", "train", "train", "valid", "test")[position % 5]


def generate_dataset(manifest: DatasetManifest, n: int, seed: int | None = None) -> Dataset:
    """Generate ``n`` samples and a stratified 60/20/20 train/valid/test split.

    Labels are balanced by construction (``i mod C`` then shuffled). Exactly
    ``round(n * severe)`` and ``round(n * benign)`` samples receive conflicts;
    severe ones are drawn from non-neutral labels. Every sample uses its own
    child generator seeded from ``(seed, index)``.
    """
    if n < 10:
        raise ValueError("n must be >= 10")
    seed = manifest.seed if seed is None else seed
    master = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    c = manifest.num_classes
    labels = master.permutation(np.arange(n) % c)

    _, frac_benign, frac_severe = manifest.mix
    n_sev, n_ben = int(round(n * frac_severe)), int(round(n * frac_benign))
    if n_sev + n_ben > n:
        n_ben = n - n_sev
    neutral = set(manifest.classes_with("neutral"))
    non_neutral = np.array([i for i in range(n) if int(labels[i]) not in neutral], dtype=int)
    if n_sev > len(non_neutral):
        raise ValueError(f"need {n_sev} non-neutral samples for severe conflicts, have {len(non_neutral)}")
    severe_idx = set(master.permutation(non_neutral)[:n_sev].tolist())
    rest = np.array([i for i in range(n) if i not in severe_idx], dtype=int)
    benign_idx = set(master.permutation(rest)[:n_ben].tolist())

    targets = {
        "benign": np.asarray(manifest.benign_targets) / sum(manifest.benign_targets),
        "severe": np.asarray(manifest.severe_targets) / sum(manifest.severe_targets),
    }
    samples: list[Sample] = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        s = make_clean_sample(manifest, f"s{i:06d}", int(labels[i]), rng)
        kind = "severe" if i in severe_idx else "benign" if i in benign_idx else None
        if kind is not None:
            target = MODALITIES[int(rng.choice(3, p=targets[kind]))]
            s = inject_conflict(s, kind, target, rng, manifest)
        samples.append(s)

    # Stratify: order by (conflict class, label), shuffled within strata, then deal
    # positions 3:1:1 into train/valid/test.
    order = []
    for conflict in CONFLICT_CLASSES:
        for label in range(c):
            stratum = [i for i, s in enumerate(samples)
                       if s.conflict_class == conflict and s.multimodal_label == label]
            order.extend(master.permutation(np.asarray(stratum, dtype=int)).tolist())
    splits = {"train": [], "valid": [], "test": []}
    for pos, idx in enumerate(order):
        splits[_split_pattern(pos)].append(samples[idx].id)
    for name in splits:
        splits[name].sort()
    return Dataset(manifest, samples, splits)


def chsims_reference_manifest(seed: int = 0) -> tuple[DatasetManifest, int]:
    """Manifest and size whose test split holds 308 benign and 149 severe samples."""
    n = 5 * (308 + 149)
    return DatasetManifest(num_classes=3, mix=(0.0, 308 * 5 / n, 149 * 5 / n), seed=seed), n


# --- serialization -----------------------------------------------------------

def _hash64(*chunks: bytes) -> str:
    h = hashlib.blake2b(digest_size=8)
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _encode_sample(s: Sample) -> bytes:
    sid = s.id.encode("utf-8")
    parts = [struct.pack("<H", len(sid)), sid,
             struct.pack("<BB", CONFLICT_CLASSES.index(s.conflict_class),
                         255 if s.conflict_modality is None else MODALITIES.index(s.conflict_modality)),
             struct.pack("<H", s.multimodal_label),
             struct.pack("<HHH", *(s.unimodal_labels[m] for m in MODALITIES))]
    for m in MODALITIES:
        sig = s.signals[m]
        seq = np.ascontiguousarray(sig.sequence, dtype="<f8")
        parts.append(struct.pack("<dII", sig.snr, *seq.shape))
        parts.append(seq.tobytes())
    return b"".join(parts)


def _body(samples: list[Sample]) -> bytes:
    out = []
    for s in samples:
        rec = _encode_sample(s)
        out.append(struct.pack("<I", len(rec)) + rec)
    return b"".join(out)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the binary container plus ``<path>.index.txt`` with split membership."""
    path = Path(path)
    manifest_text = dataset.manifest.canonical().encode("utf-8")
    body = _body(dataset.samples)
    header = json.dumps(
        {"body_hash": _hash64(manifest_text, body), "manifest": json.loads(manifest_text),
         "num_samples": len(dataset.samples)},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    path.write_bytes(MAGIC + struct.pack("<I", len(header)) + header + body)
    lines = [f"{name} {sid}" for name in ("train", "valid", "test") for sid in dataset.splits[name]]
    index_path(path).write_text("\n".join(lines) + "\n")


def index_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index.txt")


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DatasetFormatError(self.pos, what, f"need {n} bytes, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_sample(r: _Reader, manifest: DatasetManifest) -> Sample:
    (n_id,) = r.unpack("<H", "id length")
    at = r.pos
    try:
        sid = r.take(n_id, "id").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetFormatError(at, "id", str(exc)) from None
    at = r.pos
    cc, cm = r.unpack("<BB", "conflict metadata")
    if cc >= len(CONFLICT_CLASSES) or (cm != 255 and cm >= len(MODALITIES)):
        raise DatasetFormatError(at, "conflict metadata", f"codes ({cc}, {cm}) out of range")
    at = r.pos
    (mm,) = r.unpack("<H", "multimodal_label")
    uni = r.unpack("<HHH", "unimodal_labels")
    if max(mm, *uni) >= manifest.num_classes:
        raise DatasetFormatError(at, "labels", f"class index >= C={manifest.num_classes}")
    signals = {}
    for m in MODALITIES:
        snr, rows, cols = r.unpack("<dII", f"signal[{m}] header")
        payload = r.take(8 * rows * cols, f"signal[{m}] payload")
        seq = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
        signals[m] = ModalitySignal(m, seq, snr)
    return Sample(sid, signals, dict(zip(MODALITIES, uni)), mm, CONFLICT_CLASSES[cc],
                  None if cm == 255 else MODALITIES[cm])


def load_dataset(path: str | Path) -> Dataset:
    """Inverse of :func:`save_dataset`. Raises DatasetFormatError / IntegrityError."""
    path = Path(path)
    data = path.read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise DatasetFormatError(0, "magic", "not a dataset file")
    (hlen,) = r.unpack("<I", "header length")
    at = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
        manifest = DatasetManifest.from_dict(header["manifest"])
        n = int(header["num_samples"])
        expected_hash = header["body_hash"]
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(at, "header", str(exc)) from None
    body_start = r.pos
    samples = []
    for i in range(n):
        (rlen,) = r.unpack("<I", f"record[{i}] length")
        end = r.pos + rlen
        samples.append(_decode_sample(r, manifest))
        if r.pos != end:
            raise DatasetFormatError(r.pos, f"record[{i}]", f"length prefix says {rlen} bytes")
    if r.pos != len(data):
        raise DatasetFormatError(r.pos, "trailer", f"{len(data) - r.pos} unexpected trailing bytes")
    actual = _hash64(manifest.canonical().encode("utf-8"), data[body_start:])
    if actual != expected_hash:
        raise IntegrityError(f"hash mismatch: header {expected_hash}, recomputed {actual}")

    splits = {"train": [], "valid": [], "test": []}
    idx = index_path(path)
    if idx.exists():
        known = {s.id for s in samples}
        for lineno, line in enumerate(idx.read_text().splitlines(), 1):
            if not line.strip():
                continue
            name, _, sid = line.partition(" ")
            if name not in splits or sid not in known:
                raise DatasetFormatError(lineno, "index", f"bad index line {line!r}")
            splits[name].append(sid)
    return Dataset(manifest, samples, splits)
