"""Affective discernment agent: a single-step contextual bandit that routes each
sample to the fused or one of the unimodal expert predictions, trained with
advantage actor-critic."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datagen import MODALITIES
from .numerics import DTYPE, entropy, layer_norm, safe_log, scaled_dot_attention, softmax

ATOMIC_ACTIONS = ("M", "T", "A", "V")
PAIR_ACTIONS = ("AT", "VT", "AV")


def action_names(mode: str) -> tuple[str, ...]:
    if mode == "atomic":
        return ATOMIC_ACTIONS
    if mode == "expanded":
        return ATOMIC_ACTIONS + PAIR_ACTIONS
    raise ValueError(f"unknown action space mode {mode!r}")


class ConfigurationError(RuntimeError):
    pass


@dataclass
class AdaConfig:
    alpha: float = 0.5
    beta: float = 0.01
    p1: float = 0.2
    p2: float = 0.05
    sigma: float = 0.01
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    action_space_mode: str = "atomic"
    hidden: int = 64
    # ablation switches
    use_general: bool = True
    use_affective: bool = True
    calibrated_reward: bool = True
    use_value_head: bool = True
    augment: bool = True

    def __post_init__(self):
        if not (0 <= self.p2 <= self.p1 and self.p1 + self.p2 <= 1):
            raise ValueError(f"need 0 <= p2 <= p1 and p1 + p2 <= 1, got p1={self.p1}, p2={self.p2}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        action_names(self.action_space_mode)


@dataclass
class DualViewState:
    """H_a[m]: (..., d) pooled affective features; H_g[m]: (..., L, d) general features."""

    H_a: dict[str, torch.Tensor]
    H_g: dict[str, torch.Tensor]

    def index(self, idx) -> "DualViewState":
        return DualViewState({m: x[idx] for m, x in self.H_a.items()}, {m: x[idx] for m, x in self.H_g.items()})


def augment_state(state: DualViewState, config: AdaConfig, gen: torch.Generator, training: bool = True):
    """Stochastic modality dropout plus Gaussian feature noise.

    Per sample: with probability p1 one uniformly chosen modality is zeroed, with
    probability p2 two distinct ones are; noise of std sigma is added to the rest.
    Returns the new state and the (N, 3) keep-mask. Identity when not training.
    """
    n = next(iter(state.H_a.values())).shape[0]
    keep = torch.ones(n, len(MODALITIES), dtype=DTYPE)
    if not training:
        return state, keep
    u = torch.rand(n, generator=gen, dtype=DTYPE)
    order = torch.argsort(torch.rand(n, len(MODALITIES), generator=gen, dtype=DTYPE), dim=1)
    one = u < config.p1
    two = (u >= config.p1) & (u < config.p1 + config.p2)
    rows = torch.arange(n)
    keep[rows[one | two], order[one | two, 0]] = 0.0
    keep[rows[two], order[two, 1]] = 0.0
    H_a, H_g = {}, {}
    for j, m in enumerate(MODALITIES):
        k = keep[:, j]
        a, g = state.H_a[m], state.H_g[m]
        if config.sigma > 0:
            a = a + config.sigma * torch.randn(a.shape, generator=gen, dtype=DTYPE)
            g = g + config.sigma * torch.randn(g.shape, generator=gen, dtype=DTYPE)
        H_a[m] = a * k[:, None]
        H_g[m] = g * k[:, None, None]
    return DualViewState(H_a, H_g), keep


class Calibration(nn.Module):
    """Affective features query the general timeline of the same modality."""

    def __init__(self, d: int, d_k: int):
        super().__init__()
        self.q = nn.Linear(d, d_k, dtype=DTYPE)
        self.k = nn.Linear(d, d_k, dtype=DTYPE)
        self.v = nn.Linear(d, d_k, dtype=DTYPE)

    def forward(self, h_a, h_g):
        return cognitive_calibration(h_a, h_g, self)


def cognitive_calibration(h_a: torch.Tensor, h_g: torch.Tensor, params: Calibration) -> torch.Tensor:
    """S_m = softmax(Q K^T / sqrt(d_k)) V with Q from H_a (one row), K, V from H_g."""
    if h_a.shape[-1] != params.q.in_features or h_g.shape[-1] != params.k.in_features:
        raise ValueError("feature width does not match calibration params")
    q = params.q(h_a).unsqueeze(-2)
    return scaled_dot_attention(q, params.k(h_g), params.v(h_g)).squeeze(-2)


class StateEncoder(nn.Module):
    """One post-norm transformer block over the three modality tokens."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.q = nn.Linear(d, d, dtype=DTYPE)
        self.k = nn.Linear(d, d, dtype=DTYPE)
        self.v = nn.Linear(d, d, dtype=DTYPE)
        self.o = nn.Linear(d, d, dtype=DTYPE)
        self.ln1_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.ff1 = nn.Linear(d, hidden, dtype=DTYPE)
        self.ff2 = nn.Linear(hidden, d, dtype=DTYPE)
        self.ln2_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, tokens):
        x = layer_norm(tokens + self.o(scaled_dot_attention(self.q(tokens), self.k(tokens), self.v(tokens))),
                       self.ln1_w, self.ln1_b)
        x = layer_norm(x + self.ff2(F.gelu(self.ff1(x))), self.ln2_w, self.ln2_b)
        return x


def encode_state(calibrated: dict[str, torch.Tensor], identity: torch.Tensor, encoder: StateEncoder) -> torch.Tensor:
    """Add identity embeddings (3, d) to the calibrated tokens, run the block, mean-pool."""
    tokens = torch.stack([calibrated[m] for m in MODALITIES], dim=-2) + identity
    return encoder(tokens).mean(dim=-2)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden, dtype=DTYPE), nn.GELU(), nn.Linear(hidden, d_out, dtype=DTYPE))


@dataclass
class PolicyOutput:
    probs: torch.Tensor
    value: torch.Tensor
    chosen: torch.Tensor
    log_prob: torch.Tensor


def policy_forward(h_m: torch.Tensor, policy: nn.Module, value_head: nn.Module | None,
                   training: bool = False, gen: torch.Generator | None = None) -> PolicyOutput:
    """Softmax policy and scalar value on H_M. Samples actions when training,
    otherwise takes the argmax (lowest index on ties)."""
    logits = policy(h_m)
    probs = softmax(logits, axis=-1)
    value = value_head(h_m).squeeze(-1) if value_head is not None else torch.zeros(probs.shape[:-1], dtype=DTYPE)
    if training:
        flat = probs.detach().reshape(-1, probs.shape[-1])
        chosen = torch.multinomial(flat, 1, generator=gen).reshape(probs.shape[:-1])
    else:
        chosen = probs.detach().argmax(dim=-1)
    log_prob = safe_log(probs.gather(-1, chosen.unsqueeze(-1)).squeeze(-1))
    return PolicyOutput(probs, value, chosen, log_prob)


@dataclass
class RewardRecord:
    r: torch.Tensor
    correct: torch.Tensor
    confidence_used: torch.Tensor
    delta: torch.Tensor | None = None


def calibration_reward(pred_dist: torch.Tensor, y, calibrated: bool = True) -> RewardRecord:
    """r = p[y] if argmax(p) == y else -p[argmax(p)]; with ``calibrated=False``
    the reward is the bare +1/-1 correctness signal."""
    y = torch.as_tensor(y, dtype=torch.long)
    y_hat = pred_dist.argmax(dim=-1)
    correct = y_hat == y
    p_y = pred_dist.gather(-1, y.unsqueeze(-1)).squeeze(-1)
    p_hat = pred_dist.gather(-1, y_hat.unsqueeze(-1)).squeeze(-1)
    conf = torch.where(correct, p_y, p_hat)
    if not calibrated:
        conf = torch.ones_like(conf)
    r = torch.where(correct, conf, -conf)
    return RewardRecord(r, correct, conf)


@dataclass
class AdaLoss:
    total: torch.Tensor
    L_pg: torch.Tensor
    L_val: torch.Tensor
    entropy: torch.Tensor


def ada_loss(log_prob: torch.Tensor, delta: torch.Tensor, probs: torch.Tensor, alpha: float, beta: float) -> AdaLoss:
    """L_pg + alpha * L_val - beta * H(pi). ``delta = r - v`` keeps its graph into
    v for the value term; it is detached inside the policy-gradient term."""
    l_pg = (-log_prob * delta.detach()).mean()
    l_val = (delta ** 2).mean()
    h = entropy(probs, axis=-1).mean()
    return AdaLoss(l_pg + alpha * l_val - beta * h, l_pg, l_val, h)


def select_pathway_prediction(action: int, experts: dict[str, torch.Tensor], mode: str = "atomic") -> torch.Tensor:
    """Distribution for one action. Pairwise actions use the renormalized
    elementwise geometric mean of the two unimodal distributions."""
    names = action_names(mode)
    if not 0 <= int(action) < len(names):
        raise ValueError(f"action {action} outside the {mode} action space")
    name = names[int(action)]
    if len(name) == 1:
        return experts[name]
    g = torch.sqrt(experts[name[0]] * experts[name[1]])
    return g / g.sum(dim=-1, keepdim=True)


def pathway_table(experts: dict[str, torch.Tensor], mode: str) -> torch.Tensor:
    """All pathway distributions stacked: (N, |A|, C)."""
    return torch.stack([select_pathway_prediction(a, experts, mode) for a in range(len(action_names(mode)))], dim=1)


class AdaAgent(nn.Module):
    def __init__(self, d: int, config: AdaConfig):
        super().__init__()
        self.config = config
        n_actions = len(action_names(config.action_space_mode))
        self.calibration = nn.ModuleDict({m: Calibration(d, d) for m in MODALITIES})
        self.identity = nn.Parameter(0.02 * torch.randn(len(MODALITIES), d, dtype=DTYPE))
        self.encoder = StateEncoder(d, config.hidden)
        self.policy = _mlp(d, config.hidden, n_actions)
        self.value = _mlp(d, config.hidden, 1) if config.use_value_head else None

    def state_vector(self, state: DualViewState) -> torch.Tensor:
        cfg = self.config
        calibrated = {}
        for m in MODALITIES:
            h_a = state.H_a[m] if cfg.use_affective else torch.zeros_like(state.H_a[m])
            if cfg.use_general:
                calibrated[m] = cognitive_calibration(h_a, state.H_g[m], self.calibration[m])
            else:
                calibrated[m] = self.calibration[m].q(h_a)
        return encode_state(calibrated, self.identity, self.encoder)

    def forward(self, state: DualViewState, training: bool = False, gen: torch.Generator | None = None):
        return policy_forward(self.state_vector(state), self.policy, self.value, training, gen)


@dataclass
class EpisodeData:
    """Frozen-expert outputs for a split: state views, pathway table, labels."""

    state: DualViewState
    pathways: torch.Tensor  # (N, |A|, C)
    labels: torch.Tensor
    conflict: list[str]

    def __len__(self):
        return len(self.labels)


@dataclass
class TrainedAgent:
    agent: AdaAgent
    config: AdaConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def decide(self, data: EpisodeData) -> torch.Tensor:
        self.agent.eval()
        with torch.no_grad():
            return self.agent(data.state, training=False).chosen

    def predict(self, data: EpisodeData) -> tuple[torch.Tensor, torch.Tensor]:
        """Greedy actions and the class predictions of the selected pathways."""
        actions = self.decide(data)
        dists = data.pathways[torch.arange(len(actions)), actions]
        return actions, dists.argmax(dim=-1)


def build_agent(d: int, config: AdaConfig) -> AdaAgent:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return AdaAgent(d, config)


def _greedy_accuracy(agent: AdaAgent, data: EpisodeData) -> float:
    with torch.no_grad():
        actions = agent(data.state, training=False).chosen
    preds = data.pathways[torch.arange(len(data)), actions].argmax(dim=-1)
    return float((preds == data.labels).double().mean())


def train_ada(train: EpisodeData, valid: EpisodeData, config: AdaConfig, d: int,
              expert_params=(), log=None) -> TrainedAgent:
    """One bandit episode per sample: augment -> calibrate -> encode -> act ->
    reward -> advantage -> A2C update of the agent only. Returns the agent from
    the epoch with best validation accuracy."""
    expert_params = list(expert_params)
    if any(p.requires_grad for p in expert_params):
        raise ConfigurationError("expert parameters must be frozen before training the agent")
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and valid splits must be non-empty")
    agent = build_agent(d, config)
    result = TrainedAgent(agent, config)
    if config.epochs <= 0:
        return result
    opt = torch.optim.Adam(agent.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    n_actions = train.pathways.shape[1]
    best = (-1.0, 0, copy.deepcopy(agent.state_dict()))
    for epoch in range(1, config.epochs + 1):
        agent.train()
        perm = torch.randperm(len(train), generator=gen)
        sums = {"reward": 0.0, "entropy": 0.0, "value_loss": 0.0}
        counts = torch.zeros(n_actions)
        batches = 0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            state = train.state.index(idx)
            if config.augment:
                state, _ = augment_state(state, config, gen)
            out = agent(state, training=True, gen=gen)
            dist = train.pathways[idx, out.chosen]
            rec = calibration_reward(dist, train.labels[idx], calibrated=config.calibrated_reward)
            delta = rec.r - out.value
            loss = ada_loss(out.log_prob, delta, out.probs, config.alpha, config.beta)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            sums["reward"] += float(rec.r.mean())
            sums["entropy"] += float(loss.entropy.detach())
            sums["value_loss"] += float(loss.L_val.detach())
            counts += torch.bincount(out.chosen, minlength=n_actions)
            batches += 1
        agent.eval()
        acc = _greedy_accuracy(agent, valid)
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}, "valid_accuracy": acc}
        freqs = (counts / counts.sum()).tolist()
        for name, f in zip(action_names(config.action_space_mode), freqs):
            row[f"freq_{name}"] = f
        result.history.append(row)
        if log:
            log(row)
        if acc > best[0]:
            best = (acc, epoch, copy.deepcopy(agent.state_dict()))
    agent.load_state_dict(best[2])
    result.best_epoch = best[1]
    return result
