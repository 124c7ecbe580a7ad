"""Affective fusion distiller: reverse distillation from audio/visual teachers
into the text branch, cross-attention fusion, and expert training."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .datagen import MODALITIES, Dataset, Sample
from .encoders import AffectiveEncoder, temporal_logits
from .evaluation import weighted_f1
from .numerics import DTYPE, cross_entropy, kl_divergence, scaled_dot_attention, softmax

TEACHERS = ("A", "V")


@dataclass
class TensorSet:
    """Stacked signals and labels for a list of samples."""

    signals: dict[str, torch.Tensor]
    labels: torch.Tensor
    unimodal_labels: dict[str, torch.Tensor]
    conflict: list[str]
    ids: list[str]

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "TensorSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TensorSet(
            {m: x[idx] for m, x in self.signals.items()}, self.labels[idx],
            {m: y[idx] for m, y in self.unimodal_labels.items()},
            [self.conflict[i] for i in idx.tolist()], [self.ids[i] for i in idx.tolist()],
        )


def to_tensors(samples: list[Sample]) -> TensorSet:
    if not samples:
        raise ValueError("empty sample list")
    signals = {m: torch.as_tensor(np.stack([s.signals[m].sequence for s in samples]), dtype=DTYPE)
               for m in MODALITIES}
    return TensorSet(
        signals,
        torch.tensor([s.multimodal_label for s in samples], dtype=torch.long),
        {m: torch.tensor([s.unimodal_labels[m] for s in samples], dtype=torch.long) for m in MODALITIES},
        [s.conflict_class for s in samples],
        [s.id for s in samples],
    )


# --- Path I building blocks --------------------------------------------------

def class_activation_map(teacher_features: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Per-timestep class evidence I (..., L, C) read out by the linear head.

    With a per-timestep linear head, gradient-weighted and direct CAM coincide.
    The map is detached: teachers are constants inside the distillation term.
    """
    per_step, _ = temporal_logits(teacher_features, head)
    return per_step.detach()


def teacher_distribution(cam: torch.Tensor) -> torch.Tensor:
    return softmax(cam, axis=-1)


def temporal_confidence(cam: torch.Tensor, y) -> torch.Tensor:
    """Softmax over time of the ground-truth column: (..., L, C), (...) -> (..., L)."""
    y = torch.as_tensor(y, dtype=torch.long)
    column = cam.gather(-1, y.reshape(*y.shape, 1, 1).expand(*cam.shape[:-1], 1)).squeeze(-1)
    return softmax(column, axis=-1)


def distillation_loss(teachers: dict[str, tuple[torch.Tensor, torch.Tensor]], student_p: torch.Tensor) -> torch.Tensor:
    """sum_n sum_t w_t^n KL(P_n^t || P_S^t), averaged over any leading batch axis.

    ``teachers`` maps modality -> (P_n (..., L, C), w_n (..., L)); both are
    treated as constants.
    """
    total = torch.zeros(student_p.shape[:-2], dtype=student_p.dtype)
    for name, (p_n, w_n) in teachers.items():
        if p_n.shape != student_p.shape or w_n.shape != student_p.shape[:-1]:
            raise ValueError(f"teacher {name} shapes {tuple(p_n.shape)}/{tuple(w_n.shape)} "
                             f"do not match student {tuple(student_p.shape)}")
        total = total + (w_n.detach() * kl_divergence(p_n.detach(), student_p)).sum(dim=-1)
    return total.mean() if total.dim() else total


class CrossAttentionFusion(nn.Module):
    """Text queries attend over the concatenated audio+visual timeline."""

    def __init__(self, d: int, num_classes: int):
        super().__init__()
        self.q = nn.Linear(d, d, dtype=DTYPE)
        self.k = nn.Linear(d, d, dtype=DTYPE)
        self.v = nn.Linear(d, d, dtype=DTYPE)
        self.classifier = nn.Linear(2 * d, num_classes, dtype=DTYPE)

    def forward(self, feats: dict[str, torch.Tensor]) -> torch.Tensor:
        t = feats["T"]
        av = torch.cat([feats["A"], feats["V"]], dim=-2)
        if t.shape[-1] != av.shape[-1] or t.shape[:-2] != av.shape[:-2]:
            raise ValueError("modality features are not aligned")
        attended = scaled_dot_attention(self.q(t), self.k(av), self.v(av))
        return self.classifier(torch.cat([attended.mean(dim=-2), t.mean(dim=-2)], dim=-1))


class ConcatFusion(nn.Module):
    """Pooled-feature concatenation + affine head (baseline)."""

    def __init__(self, d: int, num_classes: int):
        super().__init__()
        self.classifier = nn.Linear(3 * d, num_classes, dtype=DTYPE)

    def forward(self, feats):
        return self.classifier(torch.cat([feats[m].mean(dim=-2) for m in MODALITIES], dim=-1))


def fuse(features: dict[str, torch.Tensor], fusion: nn.Module) -> torch.Tensor:
    return fusion(features)


@dataclass
class AfdConfig:
    gamma: float = 1.0
    lam: float = 0.5
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 32
    patience: int = 10
    seed: int = 0
    d: int = 32
    length: int = 16
    fusion: str = "cross_attention"
    freeze_teachers: bool = False
    teacher_epochs: int = 10


class AfdModel(nn.Module):
    def __init__(self, raw_dims: dict[str, int], raw_lengths: dict[str, int], num_classes: int,
                 d: int = 32, length: int = 16, fusion: str = "cross_attention"):
        super().__init__()
        self.num_classes = num_classes
        self.encoders = nn.ModuleDict({
            m: AffectiveEncoder(raw_dims[m], raw_lengths[m], d, length, num_classes) for m in MODALITIES
        })
        if fusion == "cross_attention":
            self.fusion = CrossAttentionFusion(d, num_classes)
        elif fusion == "concat":
            self.fusion = ConcatFusion(d, num_classes)
        else:
            raise ValueError(f"unknown fusion {fusion!r}")

    def features(self, signals: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        feats = {m: self.encoders[m](signals[m]) for m in MODALITIES}
        lengths = {f.shape[-2] for f in feats.values()}
        if len(lengths) != 1:
            raise ValueError(f"modalities not aligned: lengths {lengths}")
        return feats

    def forward(self, signals):
        feats = self.features(signals)
        per_step, pooled = {}, {}
        for m in MODALITIES:
            per_step[m], pooled[m] = temporal_logits(feats[m], self.encoders[m].head)
        return feats, per_step, pooled, self.fusion(feats)


@dataclass
class AfdLossBreakdown:
    L_M: torch.Tensor
    L_U: torch.Tensor
    L_KL: torch.Tensor
    gamma: float
    lam: float
    total: torch.Tensor

    def row(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("L_M", "L_U", "L_KL", "total")}


def afd_loss(signals: dict[str, torch.Tensor], labels: torch.Tensor, model: AfdModel,
             gamma: float, lam: float) -> AfdLossBreakdown:
    """L_M + gamma * L_U + lambda * L_KL on one batch; all terms are batch means."""
    if labels.numel() == 0:
        raise ValueError("empty batch")
    feats, per_step, pooled, fused = model(signals)
    l_m = cross_entropy(fused, labels)
    l_u = sum(cross_entropy(pooled[m], labels) for m in MODALITIES)
    if lam:
        teachers = {}
        for n in TEACHERS:
            cam = class_activation_map(feats[n], model.encoders[n].head)
            teachers[n] = (teacher_distribution(cam), temporal_confidence(cam, labels))
        l_kl = distillation_loss(teachers, softmax(per_step["T"], axis=-1))
    else:
        l_kl = torch.zeros((), dtype=DTYPE)
    total = l_m + gamma * l_u + lam * l_kl
    return AfdLossBreakdown(l_m, l_u, l_kl, gamma, lam, total)


@dataclass
class ExpertBundle:
    """Trained (then frozen) experts; ``predict`` yields p_M, p_T, p_A, p_V."""

    model: AfdModel
    config: AfdConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def freeze(self) -> "ExpertBundle":
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.model.eval()
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.model.parameters())

    def predict(self, data: TensorSet, batch_size: int = 256) -> dict[str, torch.Tensor]:
        """Four pathway distributions (N, C) plus pooled features H^a (N, d) per modality."""
        out = {k: [] for k in ("M", *MODALITIES)}
        pooled_feats = {m: [] for m in MODALITIES}
        with torch.no_grad():
            for i in range(0, len(data), batch_size):
                sig = {m: x[i:i + batch_size] for m, x in data.signals.items()}
                feats, _, pooled, fused = self.model(sig)
                out["M"].append(softmax(fused, axis=-1))
                for m in MODALITIES:
                    out[m].append(softmax(pooled[m], axis=-1))
                    pooled_feats[m].append(feats[m].mean(dim=-2))
        result = {k: torch.cat(v) for k, v in out.items()}
        result.update({f"H_{m}": torch.cat(v) for m, v in pooled_feats.items()})
        return result


def build_afd_model(manifest, config: AfdConfig) -> AfdModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return AfdModel(manifest.raw_dims, manifest.seq_lengths, manifest.num_classes,
                        config.d, config.length, config.fusion)


def _eval_wf1(model: AfdModel, data: TensorSet) -> float:
    with torch.no_grad():
        _, _, _, fused = model(data.signals)
    return weighted_f1(fused.argmax(dim=-1).tolist(), data.labels.tolist())


def _run_epochs(model, params, train: TensorSet, config: AfdConfig, loss_fn, valid: TensorSet | None,
                epochs: int, log=None, history=None):
    opt = torch.optim.Adam(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    best = (-1.0, 0, copy.deepcopy(model.state_dict()))
    stale = 0
    for epoch in range(1, epochs + 1):
        model.train()
        perm = torch.randperm(len(train), generator=gen)
        sums, batches = {"L_M": 0.0, "L_U": 0.0, "L_KL": 0.0, "total": 0.0}, 0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            sig = {m: x[idx] for m, x in train.signals.items()}
            br = loss_fn(sig, train.labels[idx])
            opt.zero_grad()
            br.total.backward()
            opt.step()
            for k, v in br.row().items():
                sums[k] += v
            batches += 1
        if valid is None:
            continue
        model.eval()
        wf1 = _eval_wf1(model, valid)
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}, "valid_wf1": wf1}
        if history is not None:
            history.append(row)
        if log:
            log(row)
        if wf1 > best[0]:
            best, stale = (wf1, epoch, copy.deepcopy(model.state_dict())), 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    return best


def train_afd(train: TensorSet, valid: TensorSet, manifest, config: AfdConfig, log=None) -> ExpertBundle:
    """Adam on L_AFD; returns the parameters from the epoch with best validation WF1.

    ``epochs=0`` returns the seeded initial parameters untouched.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and valid splits must be non-empty")
    model = build_afd_model(manifest, config)
    bundle = ExpertBundle(model, config)
    if config.epochs <= 0:
        return bundle

    params = list(model.parameters())
    if config.freeze_teachers:
        teacher_params = [p for n in TEACHERS for p in model.encoders[n].parameters()]

        def teacher_loss(sig, y):
            feats = {n: model.encoders[n](sig[n]) for n in TEACHERS}
            l_u = sum(cross_entropy(temporal_logits(feats[n], model.encoders[n].head)[1], y) for n in TEACHERS)
            zero = torch.zeros((), dtype=DTYPE)
            return AfdLossBreakdown(zero, l_u, zero, 1.0, 0.0, l_u)

        _run_epochs(model, teacher_params, train, config, teacher_loss, None, config.teacher_epochs)
        for p in teacher_params:
            p.requires_grad_(False)
        ids = {id(p) for p in teacher_params}
        params = [p for p in params if id(p) not in ids]

    best_wf1, best_epoch, state = _run_epochs(
        model, params, train, config,
        lambda sig, y: afd_loss(sig, y, model, config.gamma, config.lam),
        valid, config.epochs, log=log, history=bundle.history,
    )
    model.load_state_dict(state)
    for p in model.parameters():
        p.requires_grad_(True)
    bundle.best_epoch = best_epoch
    return bundle


def config_dict(config) -> dict:
    return asdict(config)
