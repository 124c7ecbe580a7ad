"""Two-stage run orchestration: config files, checkpoints, per-seed runs."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .ada import AdaConfig, DualViewState, EpisodeData, TrainedAgent, action_names, build_agent, pathway_table, train_ada
from .afd import AfdConfig, ExpertBundle, TensorSet, build_afd_model, to_tensors, train_afd
from .datagen import (MODALITIES, POLARITY_VALUE, Dataset, DatasetManifest, IntegrityError, generate_dataset,
                      load_dataset)
from .encoders import GeneralEncoder, build_general_encoder, encode_general
from .evaluation import action_distribution, compute_metrics, conflict_subset_eval, mean_std
from .numerics import DTYPE

CKPT_MAGIC = b"DCRCKPT1"
STAGES = ("afd", "ada")
DEFAULT_SEEDS = (41, 42, 43)  # drawn from the pool 41..45


class StageError(RuntimeError):
    pass


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    dataset: str | None = None  # path to a saved dataset; None generates one from the manifest
    num_samples: int = 3000
    data_seed: int = 0
    afd: AfdConfig = field(default_factory=lambda: AfdConfig(epochs=25, d=16))
    ada: AdaConfig = field(default_factory=lambda: AdaConfig(epochs=50, lr=1e-3))
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    general_mode: str = "pretrained"
    general_epochs: int = 30
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        coeffs = {"afd.gamma": self.afd.gamma, "afd.lam": self.afd.lam, "afd.lr": self.afd.lr,
                  "ada.alpha": self.ada.alpha, "ada.beta": self.ada.beta, "ada.lr": self.ada.lr,
                  "ada.sigma": self.ada.sigma}
        for k, v in coeffs.items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and >= 0, got {v}")
        if self.general_mode not in ("pretrained", "random"):
            raise ValueError(f"unknown general_mode {self.general_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(s) for s in text.replace(",", " ").split())
    if text.lower() == "none":
        return None
    return text


def parse_run_config(text: str) -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Nested fields use
    ``afd.<name>`` / ``ada.<name>``. Unknown keys raise ValueError."""
    base = RunConfig()
    top, sub = {}, {"afd": {}, "ada": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            group, name = key.split(".", 1)
            if group not in sub:
                raise ValueError(f"line {lineno}: unknown section {group!r}")
            target = getattr(base, group)
            if name not in {f.name for f in fields(target)}:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            sub[group][name] = _coerce(value, getattr(target, name))
        else:
            if key not in {f.name for f in fields(base)} or key in sub:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            like = getattr(base, key)
            top[key] = value if like is None and value.lower() != "none" else _coerce(value, like)
    return replace(base, afd=replace(base.afd, **sub["afd"]), ada=replace(base.ada, **sub["ada"]), **top)


def load_run_config(path: str | Path) -> RunConfig:
    return parse_run_config(Path(path).read_text())


# ------------------------------------------------------------ checkpoints

@dataclass
class Checkpoint:
    stage: str
    params: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    content_hash: str = ""


def params_hash(params) -> str:
    """blake2b-64 over sorted (name, shape, float64 bytes); accepts a module or a dict."""
    if isinstance(params, torch.nn.Module):
        params = dict(params.state_dict())
    h = hashlib.blake2b(digest_size=8)
    for name in sorted(params):
        t = params[name].detach().to(DTYPE).contiguous()
        h.update(name.encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _ckpt_meta(ckpt: Checkpoint) -> dict:
    names = sorted(ckpt.params)
    return {
        "stage": ckpt.stage,
        "config": ckpt.config,
        "history": ckpt.history,
        "tensors": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
    }


def _ckpt_payload(ckpt: Checkpoint) -> bytes:
    return b"".join(ckpt.params[n].detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes()
                    for n in sorted(ckpt.params))


def _content_hash(meta: dict, payload: bytes) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
    h.update(payload)
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write ``ckpt`` and return its content hash."""
    if ckpt.stage not in STAGES:
        raise StageError(f"unknown stage {ckpt.stage!r}")
    meta, payload = _ckpt_meta(ckpt), _ckpt_payload(ckpt)
    ckpt.content_hash = _content_hash(meta, payload)
    header = json.dumps({**meta, "hash": ckpt.content_hash}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CKPT_MAGIC + struct.pack("<I", len(header)) + header + payload)
    return ckpt.content_hash


def load_checkpoint(path: str | Path, stage: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint. ``stage`` (if given) must match the stored stage."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC or len(data) < 12:
        raise IntegrityError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint header ({exc})") from None
    payload = data[12 + n:]
    stored = header.pop("hash", None)
    actual = _content_hash(header, payload)
    if stored != actual:
        raise IntegrityError(f"{path}: hash mismatch (stored {stored}, computed {actual})")
    if stage is not None and header["stage"] != stage:
        raise StageError(f"{path}: checkpoint is stage {header['stage']!r}, expected {stage!r}")
    params, offset = {}, 0
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        params[spec["name"]] = torch.from_numpy(arr.copy()).reshape(spec["shape"])
        offset += 8 * count
    return Checkpoint(header["stage"], params, header["config"], header["history"], stored)


def apply_checkpoint(module: torch.nn.Module, ckpt: Checkpoint) -> None:
    """Copy parameters into ``module``; all names and shapes are checked before any write."""
    own = module.state_dict()
    unknown = sorted(set(ckpt.params) - set(own))
    missing = sorted(set(own) - set(ckpt.params))
    if unknown or missing:
        raise SchemaError(f"parameter names differ: unknown={unknown} missing={missing}")
    for name, t in ckpt.params.items():
        if tuple(t.shape) != tuple(own[name].shape):
            raise SchemaError(f"{name}: shape {tuple(t.shape)} != {tuple(own[name].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in ckpt.params.items()})


def _snapshot(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def expert_checkpoint(bundle: ExpertBundle) -> Checkpoint:
    return Checkpoint("afd", _snapshot(bundle.model), asdict(bundle.config), list(bundle.history))


def agent_checkpoint(agent: TrainedAgent) -> Checkpoint:
    return Checkpoint("ada", _snapshot(agent.agent), asdict(agent.config), list(agent.history))


def restore_experts(ckpt: Checkpoint, manifest: DatasetManifest) -> ExpertBundle:
    if ckpt.stage != "afd":
        raise StageError(f"expected an afd checkpoint, got {ckpt.stage!r}")
    config = AfdConfig(**ckpt.config)
    model = build_afd_model(manifest, config)
    apply_checkpoint(model, ckpt)
    return ExpertBundle(model, config, list(ckpt.history)).freeze()


def restore_agent(ckpt: Checkpoint, d: int) -> TrainedAgent:
    if ckpt.stage != "ada":
        raise StageError(f"expected an ada checkpoint, got {ckpt.stage!r}")
    config = AdaConfig(**ckpt.config)
    agent = build_agent(d, config)
    apply_checkpoint(agent, ckpt)
    return TrainedAgent(agent, config, list(ckpt.history))


# ------------------------------------------------------------- data / stages

@dataclass
class Splits:
    manifest: DatasetManifest
    train: TensorSet
    valid: TensorSet
    test: TensorSet
    test_targets: list[str | None]


def prepare_data(config: RunConfig, dataset: Dataset | None = None) -> Splits:
    if dataset is None:
        if config.dataset is not None:
            if not Path(config.dataset).exists():
                raise FileNotFoundError(f"dataset not found: {config.dataset}")
            dataset = load_dataset(config.dataset)
        else:
            dataset = generate_dataset(DatasetManifest(seed=config.data_seed), config.num_samples)
    test = dataset.split("test")
    return Splits(dataset.manifest, *(to_tensors(dataset.split(s)) for s in ("train", "valid")),
                  to_tensors(test), [s.conflict_modality for s in test])


def build_general_encoders(splits: Splits, config: RunConfig, seed: int) -> dict[str, GeneralEncoder]:
    """One frozen general encoder per modality, fitted on the clean training samples."""
    clean = [i for i, c in enumerate(splits.train.conflict) if c == "none"] or list(range(len(splits.train)))
    return {
        m: build_general_encoder(splits.train.signals[m][clean], config.afd.d, config.afd.length,
                                 mode=config.general_mode, epochs=config.general_epochs, seed=seed)[0]
        for m in MODALITIES
    }


def make_episodes(bundle: ExpertBundle, general: dict[str, GeneralEncoder], data: TensorSet,
                  mode: str = "atomic") -> EpisodeData:
    out = bundle.predict(data)
    state = DualViewState({m: out[f"H_{m}"] for m in MODALITIES},
                          {m: encode_general(data.signals[m], general[m]) for m in MODALITIES})
    return EpisodeData(state, pathway_table({k: out[k] for k in ("M", *MODALITIES)}, mode), data.labels, data.conflict)


def evaluate_predictions(name: str, preds, splits: Splits) -> dict:
    """Metrics plus per-conflict-subset accuracy as one flat row."""
    values = [POLARITY_VALUE[p] for p in splits.manifest.polarity_table]
    labels = splits.test.labels.tolist()
    preds = [int(p) for p in preds]
    row = {"model": name, **compute_metrics(preds, labels, splits.manifest.num_classes, class_values=values).row()}
    for subset, entry in conflict_subset_eval(preds, labels, splits.test.conflict).items():
        if subset != "all":
            row[f"acc_{subset}"] = entry["accuracy"]
    return row


@dataclass
class SeedResult:
    seed: int
    rows: list[dict]
    actions: dict
    expert_hash_before: str
    expert_hash_after: str
    afd_checkpoint_hash: str
    ada_checkpoint_hash: str


def run_seed(config: RunConfig, splits: Splits, seed: int, out_dir: Path | None = None, log=None) -> SeedResult:
    """Stage 1 (experts), freeze, stage 2 (agent), then evaluate every pathway."""
    afd_cfg = replace(config.afd, seed=seed)
    bundle = train_afd(splits.train, splits.valid, splits.manifest, afd_cfg, log=log).freeze()
    afd_ckpt = expert_checkpoint(bundle)
    before = params_hash(bundle.model)

    general = build_general_encoders(splits, config, seed)
    mode = config.ada.action_space_mode
    episodes = {s: make_episodes(bundle, general, getattr(splits, s), mode) for s in ("train", "valid", "test")}
    ada_cfg = replace(config.ada, seed=seed)
    agent = train_ada(episodes["train"], episodes["valid"], ada_cfg, config.afd.d, bundle.model.parameters(), log=log)
    after = params_hash(bundle.model)

    baseline = train_afd(splits.train, splits.valid, splits.manifest, replace(afd_cfg, gamma=0.0, lam=0.0)).freeze()

    actions, preds = agent.predict(episodes["test"])
    pathways = episodes["test"].pathways
    rows = [evaluate_predictions("dcr", preds, splits)]
    for i, name in enumerate(action_names("atomic")):
        rows.append(evaluate_predictions(f"path_{name}", pathways[:, i].argmax(-1), splits))
    rows.append(evaluate_predictions("fusion_baseline", baseline.predict(splits.test)["M"].argmax(-1), splits))
    for r in rows:
        r["seed"] = seed
    dist = action_distribution(actions.tolist(), splits.test.conflict, len(action_names(mode)))

    afd_hash = ada_hash = ""
    if out_dir is not None:
        afd_hash = save_checkpoint(afd_ckpt, out_dir / f"seed{seed}_afd.ckpt")
        ada_hash = save_checkpoint(agent_checkpoint(agent), out_dir / f"seed{seed}_ada.ckpt")
    return SeedResult(seed, rows, dist, before, after, afd_hash, ada_hash)


# ---------------------------------------------------------------- output

METRIC_KEYS = ("accuracy", "weighted_f1", "mae", "corr", "f1_neg_vs_nonneg", "f1_neg_vs_pos",
               "acc_none", "acc_benign", "acc_severe")


def _absent_if_nan(v: float) -> float | None:
    return None if math.isnan(v) else v


def aggregate(rows: list[dict], key: str = "model") -> list[dict]:
    """mean and population std per metric, grouped by ``key``, in first-seen order."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for name, rs in groups.items():
        row = {key: name, "n_seeds": len(rs)}
        for k in METRIC_KEYS:
            if k in rs[0]:
                mean, std = mean_std([r[k] for r in rs])
                row[f"{k}_mean"], row[f"{k}_std"] = _absent_if_nan(mean), _absent_if_nan(std)
        out.append(row)
    return out


def aggregate_table(rows: list[dict]) -> list[dict]:
    """The per-seed rows followed by one mean row (seed = "mean")."""
    keys = [k for k in METRIC_KEYS if k in rows[0]] if rows else []
    mean_row = {"seed": "mean", **{k: _absent_if_nan(mean_std([r[k] for r in rows])[0]) for k in keys}}
    return [{"seed": r["seed"], **{k: r[k] for k in keys}} for r in rows] + [mean_row]


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})


@dataclass
class RunResult:
    seeds: list[SeedResult]
    summary: dict

    def rows(self, model: str | None = None) -> list[dict]:
        return [r for s in self.seeds for r in s.rows if model is None or r["model"] == model]


def run_sequential(config: RunConfig, dataset: Dataset | None = None, log=None) -> RunResult:
    """Per seed: train experts, freeze, train the agent over them, evaluate.

    Writes ``results.csv`` (per seed), ``results_mean.csv``, ``actions.csv``,
    ``summary.json`` and the stage checkpoints into ``config.out_dir``.
    """
    out_dir = Path(config.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / ".write_test").write_text("")
        (out_dir / ".write_test").unlink()
    except OSError as exc:
        raise OSError(f"output directory not writable: {out_dir} ({exc})") from None
    splits = prepare_data(config, dataset)
    seeds = [run_seed(config, splits, s, out_dir, log=log) for s in config.seeds]

    per_seed = [r for s in seeds for r in s.rows]
    means = aggregate(per_seed)
    names = action_names(config.ada.action_space_mode)
    action_rows = [
        {"seed": s.seed, "subset": subset, **({f"freq_{a}": f for a, f in zip(names, freqs)} if freqs else {})}
        for s in seeds for subset, freqs in s.actions.items()
    ]
    summary = {
        "config": config.to_dict(),
        "manifest_hash": hashlib.blake2b(splits.manifest.canonical().encode(), digest_size=8).hexdigest(),
        "per_seed": [{"seed": s.seed, "expert_hash_before": s.expert_hash_before,
                      "expert_hash_after": s.expert_hash_after, "afd_checkpoint": s.afd_checkpoint_hash,
                      "ada_checkpoint": s.ada_checkpoint_hash, "rows": s.rows, "actions": s.actions}
                     for s in seeds],
        "mean": means,
    }
    write_csv(out_dir / "results.csv", per_seed)
    write_csv(out_dir / "results_mean.csv", means)
    write_csv(out_dir / "aggregate.csv", aggregate_table([r for r in per_seed if r["model"] == "dcr"]))
    write_csv(out_dir / "actions.csv", action_rows)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return RunResult(seeds, summary)
