import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from dcr.ada import (AdaConfig, Calibration, ConfigurationError, DualViewState, StateEncoder, ada_loss,
                     augment_state, build_agent, calibration_reward, cognitive_calibration, encode_state,
                     pathway_table, policy_forward, select_pathway_prediction, train_ada)
from dcr.datagen import MODALITIES
from dcr.numerics import DTYPE, entropy, gradient_check, softmax, tensor

from micro import text_dominant_set
from oracles import attention_loop, gelu_loop, layer_norm_loop, linear_loop

LN4 = math.log(4)


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def state(n=5, d=4, length=3, seed=0):
    return DualViewState({m: rand(n, d, seed=seed + i) for i, m in enumerate(MODALITIES)},
                         {m: rand(n, length, d, seed=seed + 10 + i) for i, m in enumerate(MODALITIES)})


def masked(s: DualViewState):
    """(N, 3) bool: modality zeroed in both views."""
    return torch.stack([(s.H_a[m] == 0).all(-1) & (s.H_g[m] == 0).all(-1).all(-1) for m in MODALITIES], dim=1)


# --- augmentation --------------------------------------------------------------

def test_augment_identity_config():
    s = state()
    out, keep = augment_state(s, AdaConfig(p1=0.0, p2=0.0, sigma=0.0), torch.Generator().manual_seed(0))
    assert all(torch.equal(out.H_a[m], s.H_a[m]) and torch.equal(out.H_g[m], s.H_g[m]) for m in MODALITIES)
    assert torch.equal(keep, torch.ones(5, 3, dtype=DTYPE))


def test_augment_forced_single_mask():
    s = state(n=200)
    for seed in range(5):
        out, keep = augment_state(s, AdaConfig(p1=1.0, p2=0.0, sigma=0.0), torch.Generator().manual_seed(seed))
        assert torch.equal((keep == 0).sum(1), torch.ones(200, dtype=torch.long))
        assert torch.equal(masked(out), keep == 0)


def test_augment_disabled_at_evaluation():
    s = state()
    out, _ = augment_state(s, AdaConfig(p1=1.0, p2=0.0), torch.Generator(), training=False)
    assert out is s


def test_augment_rates_over_10000_draws():
    s = state(n=10_000, d=2, length=1)
    out, keep = augment_state(s, AdaConfig(sigma=0.01), torch.Generator().manual_seed(7))
    n_masked = (keep == 0).sum(1)
    assert float((n_masked == 1).double().mean()) == pytest.approx(0.2, abs=0.02)
    assert float((n_masked == 2).double().mean()) == pytest.approx(0.05, abs=0.01)
    assert int((n_masked == 3).sum()) == 0
    assert torch.equal(masked(out), keep == 0)
    # masked modalities are chosen uniformly
    per_modality = (keep == 0).double().mean(0)
    assert torch.allclose(per_modality, torch.full((3,), per_modality.mean().item(), dtype=DTYPE), atol=0.015)


def test_augment_noise_std():
    s = state(n=4000, d=4, length=1)
    out, keep = augment_state(s, AdaConfig(p1=0.0, p2=0.0, sigma=0.01), torch.Generator().manual_seed(1))
    diff = out.H_a["T"] - s.H_a["T"]
    assert float(diff.std()) == pytest.approx(0.01, rel=0.05)
    assert abs(float(diff.mean())) < 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        AdaConfig(p1=0.1, p2=0.2)
    with pytest.raises(ValueError):
        AdaConfig(p1=0.8, p2=0.5)
    with pytest.raises(ValueError):
        AdaConfig(sigma=-1.0)
    with pytest.raises(ValueError):
        AdaConfig(action_space_mode="pairs")


# --- cognitive calibration -----------------------------------------------------

def test_calibration_single_key_ignores_query():
    cal = Calibration(4, 3)
    h_g = rand(1, 4, seed=2)
    for seed in range(3):
        out = cognitive_calibration(rand(4, seed=seed), h_g, cal)
        assert torch.allclose(out, cal.v(h_g)[0], atol=1e-14)


def test_calibration_identical_rows():
    cal = Calibration(4, 3)
    row = rand(4, seed=3)
    assert torch.allclose(cognitive_calibration(rand(4), row.expand(6, 4), cal), cal.v(row), atol=1e-12)


def test_calibration_matches_attention_oracle():
    cal = Calibration(4, 3)
    h_a, h_g = rand(4, seed=1), rand(5, 4, seed=2)
    w = {k: (getattr(cal, k).weight.tolist(), getattr(cal, k).bias.tolist()) for k in ("q", "k", "v")}
    ref = attention_loop(linear_loop([h_a.tolist()], *w["q"]), linear_loop(h_g.tolist(), *w["k"]),
                         linear_loop(h_g.tolist(), *w["v"]))[0]
    assert cognitive_calibration(h_a, h_g, cal).tolist() == pytest.approx(ref, abs=1e-9)


def test_calibration_shape_mismatch():
    with pytest.raises(ValueError):
        cognitive_calibration(rand(3), rand(5, 4), Calibration(4, 4))


# --- state encoder -------------------------------------------------------------

def block_oracle(tokens, enc: StateEncoder):
    p = lambda lin: (lin.weight.tolist(), lin.bias.tolist())
    att = attention_loop(linear_loop(tokens, *p(enc.q)), linear_loop(tokens, *p(enc.k)), linear_loop(tokens, *p(enc.v)))
    o = linear_loop(att, *p(enc.o))
    x = [layer_norm_loop([a + b for a, b in zip(t, r)], enc.ln1_w.tolist(), enc.ln1_b.tolist())
         for t, r in zip(tokens, o)]
    hidden = [[gelu_loop(v) for v in row] for row in linear_loop(x, *p(enc.ff1))]
    ff = linear_loop(hidden, *p(enc.ff2))
    y = [layer_norm_loop([a + b for a, b in zip(t, r)], enc.ln2_w.tolist(), enc.ln2_b.tolist()) for t, r in zip(x, ff)]
    return [sum(r[j] for r in y) / len(y) for j in range(len(y[0]))]


def test_encode_state_matches_block_oracle():
    torch.manual_seed(0)
    enc = StateEncoder(4, 6)
    with torch.no_grad():
        enc.ln1_w.copy_(rand(4, seed=8))
        enc.ln2_b.copy_(rand(4, seed=9))
    cal = {m: rand(4, seed=i) for i, m in enumerate(MODALITIES)}
    ident = rand(3, 4, seed=5)
    tokens = [(cal[m] + ident[i]).tolist() for i, m in enumerate(MODALITIES)]
    assert encode_state(cal, ident, enc).tolist() == pytest.approx(block_oracle(tokens, enc), abs=1e-9)


def test_encode_state_permutation_symmetry():
    torch.manual_seed(1)
    enc = StateEncoder(4, 6)
    cal = {m: rand(4, seed=i) for i, m in enumerate(MODALITIES)}
    ident = rand(3, 4, seed=5)
    perm = [2, 0, 1]
    cal_p = {m: cal[MODALITIES[perm[i]]] for i, m in enumerate(MODALITIES)}
    out = encode_state(cal, ident, enc)
    assert torch.allclose(encode_state(cal_p, ident[perm], enc), out, atol=1e-12)


def test_encode_state_all_zero_is_deterministic():
    enc = StateEncoder(4, 6)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    cal = {m: torch.zeros(4, dtype=DTYPE) for m in MODALITIES}
    a = encode_state(cal, torch.zeros(3, 4, dtype=DTYPE), enc)
    b = encode_state(cal, torch.zeros(3, 4, dtype=DTYPE), enc)
    assert torch.equal(a, b) and torch.equal(a, torch.zeros(4, dtype=DTYPE))


# --- policy ----------------------------------------------------------------------

class Fixed(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, h):
        return self.logits.expand(*h.shape[:-1], len(self.logits))


def zero_mlp(d_out):
    m = nn.Sequential(nn.Linear(4, 8, dtype=DTYPE), nn.GELU(), nn.Linear(8, d_out, dtype=DTYPE))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    return m


def test_policy_zero_heads_uniform():
    out = policy_forward(torch.zeros(4, dtype=DTYPE), zero_mlp(4), zero_mlp(1))
    assert out.probs.tolist() == [0.25] * 4
    assert float(out.value.detach()) == 0.0
    assert int(out.chosen) == 0  # lowest index wins ties


def test_policy_argmax_at_evaluation():
    out = policy_forward(torch.zeros(3, 4, dtype=DTYPE), Fixed(tensor([10.0, 0.0, 0.0, 0.0])), None)
    assert out.chosen.tolist() == [0, 0, 0]
    assert torch.allclose(out.log_prob, torch.log(out.probs[:, 0]), atol=1e-12)


def test_policy_sampling_frequencies():
    probs = tensor([0.7, 0.1, 0.1, 0.1])
    out = policy_forward(torch.zeros(10_000, 4, dtype=DTYPE), Fixed(torch.log(probs)), None, training=True,
                         gen=torch.Generator().manual_seed(3))
    freq = torch.bincount(out.chosen, minlength=4).double() / 10_000
    assert torch.allclose(freq, probs, atol=0.02)
    assert torch.allclose(out.log_prob, torch.log(probs[out.chosen]), atol=1e-9)


# --- reward ---------------------------------------------------------------------

def test_reward_examples():
    assert float(calibration_reward(tensor([0.05, 0.9, 0.05]), 1).r) == pytest.approx(0.9, abs=1e-12)
    rec = calibration_reward(tensor([0.1, 0.8, 0.1]), 0)
    assert float(rec.r) == pytest.approx(-0.8, abs=1e-12) and not bool(rec.correct)
    assert float(calibration_reward(torch.full((4,), 0.25, dtype=DTYPE), 0).r) == pytest.approx(0.25, abs=1e-12)
    assert float(calibration_reward(tensor([0.1, 0.8, 0.1]), 0, calibrated=False).r) == -1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.integers(0, 5))
def test_reward_bounds_and_sign(logits, y):
    p = softmax(tensor(logits))
    y = y % len(logits)
    rec = calibration_reward(p, y)
    r = float(rec.r)
    assert abs(r) <= 1.0
    assert (r > 0) == bool(rec.correct) and r != 0


# --- A2C loss -------------------------------------------------------------------

def test_ada_loss_zero_advantage():
    probs = softmax(rand(5, 4), -1)
    out = ada_loss(torch.log(probs[:, 0]), torch.zeros(5, dtype=DTYPE), probs, 0.5, 0.01)
    assert float(out.L_pg) == 0.0 and float(out.L_val) == 0.0
    assert float(out.total) == pytest.approx(-0.01 * float(entropy(probs, axis=-1).mean()), abs=1e-15)


def test_ada_loss_entropy_limits():
    uniform = torch.full((2, 4), 0.25, dtype=DTYPE)
    assert float(ada_loss(torch.zeros(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE), uniform, 0.5, 1.0).entropy) \
        == pytest.approx(LN4, abs=1e-12)
    det = tensor([[1.0, 0.0, 0.0, 0.0]])
    assert float(ada_loss(torch.zeros(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE), det, 0.5, 1.0).entropy) == 0.0


def test_ada_loss_advantage_constant_in_policy_term():
    logits = rand(3, 4).requires_grad_(True)
    v = rand(3, seed=1).requires_grad_(True)
    probs = softmax(logits, -1)
    r = tensor([0.9, -0.5, 0.3])
    out = ada_loss(torch.log(probs[:, 1]), r - v, probs, 0.5, 0.0)
    g_logits, g_v = torch.autograd.grad(out.total, [logits, v])
    # value gradient comes from L_val alone
    assert torch.allclose(g_v, -2 * 0.5 * (r - v).detach() / 3, atol=1e-14)
    # policy gradient uses delta as a constant
    ref = torch.autograd.grad((-torch.log(softmax(logits, -1)[:, 1]) * (r - v).detach()).mean(), logits)[0]
    assert torch.allclose(g_logits, ref, atol=1e-14)


def test_advantage_baseline_reduces_variance():
    torch.manual_seed(0)
    n, d = 256, 4
    h = rand(n, d, seed=2)
    policy = nn.Sequential(nn.Linear(d, 16, dtype=DTYPE), nn.GELU(), nn.Linear(16, 4, dtype=DTYPE))
    value = nn.Sequential(nn.Linear(d, 16, dtype=DTYPE), nn.GELU(), nn.Linear(16, 1, dtype=DTYPE))
    with torch.no_grad():
        out = policy_forward(h, policy, None, training=True, gen=torch.Generator().manual_seed(1))
    r = 0.6 + 0.3 * torch.tanh(h[:, 0]) + 0.1 * (out.chosen == 0).to(DTYPE)
    opt = torch.optim.Adam(value.parameters(), lr=1e-2)
    for _ in range(300):
        loss = ((r - value(h).squeeze(-1)) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        v = value(h).squeeze(-1)
    lp = out.log_prob.detach()
    assert float((-lp * (r - v)).var()) <= float((-lp * r).var())


# --- pathway selection ------------------------------------------------------------

def test_select_pathway_examples():
    experts = {"M": tensor([0.3, 0.7]), "T": tensor([0.2, 0.8]), "A": tensor([0.8, 0.2]), "V": tensor([0.5, 0.5])}
    assert select_pathway_prediction(1, experts) is experts["T"]
    assert select_pathway_prediction(4, experts, "expanded").tolist() == pytest.approx([0.5, 0.5], abs=1e-12)
    same = dict(experts, A=experts["T"])
    assert select_pathway_prediction(4, same, "expanded").tolist() == pytest.approx([0.2, 0.8], abs=1e-12)
    with pytest.raises(ValueError):
        select_pathway_prediction(4, experts)
    with pytest.raises(ValueError):
        select_pathway_prediction(7, experts, "expanded")


def test_pathway_table_rows_are_distributions():
    experts = {m: softmax(rand(20, 3, seed=i), -1) for i, m in enumerate(("M", *MODALITIES))}
    table = pathway_table(experts, "expanded")
    assert table.shape == (20, 7, 3)
    assert torch.allclose(table.sum(-1), torch.ones(20, 7, dtype=DTYPE), atol=1e-9, rtol=0)


# --- gradient fidelity of the agent objective ---------------------------------------

def test_gradient_ada_objective():
    # the advantage is a constant inside L_pg, so the finite-difference target is
    # the surrogate with delta frozen at its unperturbed value there
    data = text_dominant_set(2, d=4, length=3, seed=1)
    cfg = AdaConfig(hidden=6, seed=2)
    agent = build_agent(4, cfg)
    params = list(agent.parameters())
    idx = torch.arange(2)

    def parts():
        out = agent(data.state, training=False)
        r = calibration_reward(data.pathways[idx, out.chosen], data.labels).r
        return out, r

    out, r = parts()
    delta0 = (r - out.value).detach()

    def surrogate(_):
        out, r = parts()
        h = entropy(out.probs, axis=-1).mean()
        return (-out.log_prob * delta0).mean() + cfg.alpha * ((r - out.value) ** 2).mean() - cfg.beta * h

    g_loss = torch.autograd.grad(ada_loss(out.log_prob, r - out.value, out.probs, cfg.alpha, cfg.beta).total, params)
    g_sur = torch.autograd.grad(surrogate(None), params)
    assert all(torch.allclose(a, b, atol=1e-14) for a, b in zip(g_loss, g_sur))
    assert gradient_check(surrogate, params) < 1e-4


# --- training -------------------------------------------------------------------

def frozen_params():
    p = nn.Parameter(torch.ones(3, dtype=DTYPE), requires_grad=False)
    return [p]


def test_unfrozen_experts_rejected():
    data = text_dominant_set(20)
    with pytest.raises(ConfigurationError):
        train_ada(data, data, AdaConfig(epochs=1), 8, [nn.Parameter(torch.ones(2, dtype=DTYPE))])


def test_epochs_zero_returns_initial_agent():
    data = text_dominant_set(20)
    cfg = AdaConfig(epochs=0, seed=4)
    trained = train_ada(data, data, cfg, 8, frozen_params())
    init = build_agent(8, cfg).state_dict()
    assert all(torch.equal(v, init[k]) for k, v in trained.agent.state_dict().items())


def test_training_deterministic_and_logs_rows():
    data = text_dominant_set(64)
    cfg = AdaConfig(epochs=2, seed=4, lr=1e-3)
    a, b = train_ada(data, data, cfg, 8, frozen_params()), train_ada(data, data, cfg, 8, frozen_params())
    assert all(torch.equal(v, b.agent.state_dict()[k]) for k, v in a.agent.state_dict().items())
    row = a.history[0]
    assert {"epoch", "reward", "entropy", "value_loss", "valid_accuracy"} <= set(row)
    assert sum(row[f"freq_{x}"] for x in "MTAV") == pytest.approx(1.0, abs=1e-9)


def test_expert_parameters_untouched():
    params = frozen_params()
    before = params[0].clone()
    data = text_dominant_set(64)
    train_ada(data, data, AdaConfig(epochs=2, lr=1e-3), 8, params)
    assert params[0].grad is None and torch.equal(params[0], before)


def test_text_dominant_micro_set():
    train, test = text_dominant_set(256, seed=0), text_dominant_set(128, seed=1)
    trained = train_ada(train, train, AdaConfig(epochs=50, seed=0, lr=1e-3), 8, frozen_params())
    actions, _ = trained.predict(test)
    assert float((actions == 1).double().mean()) > 0.9
