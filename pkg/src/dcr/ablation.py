"""Variant runner for the component ablations.

Each variant names the stage-1 objective it needs (gamma, lambda, fusion) and,
if it uses an agent, the AdaConfig overrides. Stage-1 experts and general
encoders are cached per seed so variants sharing them train them once.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .afd import ExpertBundle, train_afd
from .ada import action_names, train_ada
from .evaluation import action_distribution
from .pipeline import (RunConfig, Splits, aggregate, build_general_encoders, evaluate_predictions, make_episodes,
                       prepare_data, write_csv)


class ArgumentError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    name: str
    gamma: float | None = None  # None: take from the run config
    lam: float | None = None
    fusion: str = "cross_attention"
    agent: dict | None = field(default_factory=dict)  # None: always use the fused pathway


VARIANTS = {v.name: v for v in (
    Variant("full"),
    Variant("afd_only", agent=None),
    Variant("ada_only", lam=0.0),
    Variant("neither", gamma=0.0, lam=0.0, agent=None),
    Variant("no_distill", lam=0.0, agent=None),
    Variant("concat", gamma=0.0, lam=0.0, fusion="concat", agent=None),
    Variant("no_general", agent={"use_general": False}),
    Variant("no_emotion", agent={"use_affective": False}),
    Variant("no_calib_reward", agent={"calibrated_reward": False}),
    Variant("no_value_head", agent={"use_value_head": False}),
    Variant("no_augmentation", agent={"augment": False}),
    Variant("expanded", agent={"action_space_mode": "expanded"}),
)}


def resolve_variants(names) -> list[Variant]:
    names = list(names)
    if not names:
        raise ArgumentError("no variants requested")
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ArgumentError(f"unknown variant(s) {unknown}; choose from {sorted(VARIANTS)}")
    return [VARIANTS[n] for n in names]


class _SeedCache:
    def __init__(self, config: RunConfig, splits: Splits, seed: int, log=None):
        self.config, self.splits, self.seed, self.log = config, splits, seed, log
        self.experts: dict[tuple, ExpertBundle] = {}
        self._general = None

    def bundle(self, v: Variant) -> ExpertBundle:
        cfg = replace(self.config.afd, seed=self.seed, fusion=v.fusion,
                      gamma=self.config.afd.gamma if v.gamma is None else v.gamma,
                      lam=self.config.afd.lam if v.lam is None else v.lam)
        key = (cfg.gamma, cfg.lam, cfg.fusion)
        if key not in self.experts:
            s = self.splits
            self.experts[key] = train_afd(s.train, s.valid, s.manifest, cfg, log=self.log).freeze()
        return self.experts[key]

    @property
    def general(self):
        if self._general is None:
            self._general = build_general_encoders(self.splits, self.config, self.seed)
        return self._general


def run_variant(v: Variant, cache: _SeedCache) -> tuple[dict, dict | None]:
    """Test row for one variant/seed, plus its action distribution if it has an agent."""
    bundle = cache.bundle(v)
    splits = cache.splits
    if v.agent is None:
        row = evaluate_predictions(v.name, bundle.predict(splits.test)["M"].argmax(-1), splits)
        return row, None
    ada_cfg = replace(cache.config.ada, seed=cache.seed, **v.agent)
    mode = ada_cfg.action_space_mode
    ep = {s: make_episodes(bundle, cache.general, getattr(splits, s), mode) for s in ("train", "valid", "test")}
    agent = train_ada(ep["train"], ep["valid"], ada_cfg, cache.config.afd.d, bundle.model.parameters(), log=cache.log)
    actions, preds = agent.predict(ep["test"])
    dist = action_distribution(actions.tolist(), splits.test.conflict, len(action_names(mode)))
    row = evaluate_predictions(v.name, preds, splits)
    # constant-policy references for the arbitration-dominance check
    for a, name in enumerate(action_names(mode)[:2]):
        always = ep["test"].pathways[:, a].argmax(dim=-1)
        row[f"always_{name}_accuracy"] = float((always == splits.test.labels).double().mean())
    return row, dist


@dataclass
class AblationResult:
    rows: list[dict]
    table: list[dict]
    actions: list[dict]

    def mean(self, variant: str, metric: str = "accuracy") -> float:
        return next(r[f"{metric}_mean"] for r in self.table if r["variant"] == variant)


def ablation_runner(config: RunConfig, variants, out_dir: str | Path | None = None, splits: Splits | None = None,
                    log=None) -> AblationResult:
    """Run every variant under every seed in ``config.seeds``; returns per-seed rows
    and a mean/std table (one row per variant)."""
    chosen = resolve_variants(variants)
    splits = splits or prepare_data(config)
    rows, actions = [], []
    for seed in config.seeds:
        cache = _SeedCache(config, splits, seed, log)
        for v in chosen:
            row, dist = run_variant(v, cache)
            row["variant"] = row.pop("model")
            row["seed"] = seed
            rows.append(row)
            if dist is not None:
                names = action_names(replace(config.ada, **v.agent).action_space_mode)
                for subset, freqs in dist.items():
                    actions.append({"variant": v.name, "seed": seed, "subset": subset,
                                    **({f"freq_{a}": f for a, f in zip(names, freqs)} if freqs else {})})
    table = aggregate(rows, key="variant")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "ablation_seeds.csv", rows)
        write_csv(out / "ablation.csv", table)
        write_csv(out / "ablation_actions.csv", actions)
    return AblationResult(rows, table, actions)
