"""Adversarial adaptation core.

Marginal and per-class conditional domain classifiers (three-layer MLPs,
sigmoid output), the class-wise transferability weighting derived from an
EMA of each conditional classifier's domain BCE, and a probe-based
H-divergence estimator used for reporting.

Sign convention: every domain loss here is a BCE that the classifier
minimizes; the feature extractor receives the negated gradient through a
gradient-reversal node inserted by the training loop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, Tensor
from .rng import make_rng

DOMAIN_HIDDEN = 64
PARTICIPATION_FLOOR = 0.05   # a cell joins class k's conditional loss iff yhat_k exceeds this
EMA_DECAY = 0.99
WARMUP_ITERATIONS = 50
WEIGHT_CLIP = (0.1, 3.0)
MIN_PROBE_VECTORS = 40


def init_domain_classifier(in_dim: int, rng: np.random.Generator,
                           prefix: str) -> dict[str, np.ndarray]:
    """Three linear layers in_dim -> 64 -> 64 -> 1, relu/relu/sigmoid."""
    def uniform(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)
    return {
        f"{prefix}.w1": uniform(in_dim, (in_dim, DOMAIN_HIDDEN)),
        f"{prefix}.b1": np.zeros(DOMAIN_HIDDEN),
        f"{prefix}.w2": uniform(DOMAIN_HIDDEN, (DOMAIN_HIDDEN, DOMAIN_HIDDEN)),
        f"{prefix}.b2": np.zeros(DOMAIN_HIDDEN),
        f"{prefix}.w3": uniform(DOMAIN_HIDDEN, (DOMAIN_HIDDEN, 1)),
        f"{prefix}.b3": np.zeros(1),
    }


def build_domain_classifier(g: Graph, p: dict[str, Node], x: Node, prefix: str) -> Node:
    h = g.relu(g.add(g.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    h = g.relu(g.add(g.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"]))
    return g.sigmoid(g.add(g.matmul(h, p[f"{prefix}.w3"]), p[f"{prefix}.b3"]))


def build_domain_bce(g: Graph, d_source: Node, d_target: Node,
                     mask_source: np.ndarray | None = None,
                     mask_target: np.ndarray | None = None) -> Node:
    """-(mean log D(source) + mean log(1 - D(target))), optionally masked.

    Masks are (N, 1) 0/1 arrays; the mean then runs over the masked rows
    only. Logs are floored inside the log kernel, so a saturated classifier
    stays finite.
    """
    def masked_mean(node: Node, mask: np.ndarray | None) -> Node:
        if mask is None:
            return g.reduce_mean(node)
        count = float(mask.sum())
        total = mask.size
        return g.scale(g.reduce_mean(g.multiply(node, g.const(mask))), total / count)

    term_s = masked_mean(g.log(d_source), mask_source)
    one_minus = g.add(g.const(1.0), g.scale(d_target, -1.0))
    term_t = masked_mean(g.log(one_minus), mask_target)
    return g.scale(g.add(term_s, term_t), -1.0)


def build_conditional_input(g: Graph, feat: Node, probs: Node, offsets: Node,
                            k: int, num_classes: int) -> Node:
    """yhat_k * (features concat offsets): (N, 36) conditioning input for D_k."""
    selector = np.zeros((num_classes + 1, 1))
    selector[k, 0] = 1.0
    yk = g.matmul(probs, g.const(selector))          # (N, 1)
    return g.multiply(g.concat([feat, offsets], axis=1), yk)


# -- pure wrappers -------------------------------------------------------------

def _flatten_cells(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(-1, arr.shape[-1])


def marginal_domain_loss(featmap_s: np.ndarray, featmap_t: np.ndarray,
                         dm_params: dict[str, np.ndarray]) -> float:
    fs, ft = _flatten_cells(featmap_s), _flatten_cells(featmap_t)
    if fs.size == 0 or ft.size == 0:
        raise ValueError("marginal_domain_loss needs cells from both domains")
    g = Graph()
    p = {name: g.param(name, v, requires_grad=False) for name, v in dm_params.items()}
    prefix = next(iter(dm_params)).split(".")[0]
    ds = build_domain_classifier(g, p, g.const(fs), prefix)
    dt = build_domain_classifier(g, p, g.const(ft), prefix)
    build_domain_bce(g, ds, dt)
    return float(g.evaluate().data)


def conditional_input(featmap: np.ndarray, class_probs: np.ndarray,
                      box_offsets: np.ndarray, k: int, cell: tuple[int, int]) -> np.ndarray:
    """Single-cell conditioning vector, linear in the class-k probability."""
    u, v = cell
    yk = class_probs[u, v, k]
    return yk * np.concatenate([featmap[u, v], box_offsets[u, v]])


def conditional_domain_loss_k(inputs_s: np.ndarray, inputs_t: np.ndarray,
                              dk_params: dict[str, np.ndarray]) -> float:
    """BCE of D_k on participating conditional inputs; 0 when a side is empty."""
    if inputs_s.size == 0 or inputs_t.size == 0:
        return 0.0
    return marginal_domain_loss(inputs_s, inputs_t, dk_params)


# -- class-wise transferability -------------------------------------------------

@dataclass
class TransferabilityState:
    ema: np.ndarray               # per-class EMA of the conditional domain BCE
    weights: np.ndarray           # s_k, mean-1 normalized then clipped
    warmup_remaining: int

    def as_lists(self) -> dict:
        return {"ema": self.ema.tolist(), "weights": self.weights.tolist(),
                "warmup_remaining": self.warmup_remaining}


def init_transferability(num_classes: int,
                         warmup: int = WARMUP_ITERATIONS) -> TransferabilityState:
    return TransferabilityState(np.zeros(num_classes), np.ones(num_classes), warmup)


def update_transferability(state: TransferabilityState,
                           per_class_bce: list[float | None]) -> TransferabilityState:
    """EMA update; classes with no batch contribution carry the previous EMA.

    Weights are K * ema / sum(ema) (mean 1), then clipped to [0.1, 3.0];
    the clip is terminal, renormalization is not reapplied. During warmup
    all weights stay 1. Weights are constants w.r.t. gradient flow.
    """
    if len(per_class_bce) != state.ema.size:
        raise ValueError(f"expected {state.ema.size} BCE entries, got {len(per_class_bce)}")
    ema = state.ema.copy()
    for k, val in enumerate(per_class_bce):
        if val is not None:
            ema[k] = EMA_DECAY * ema[k] + (1.0 - EMA_DECAY) * float(val)
    in_warmup = state.warmup_remaining > 0
    if in_warmup or not np.any(ema > 0):
        weights = np.ones_like(ema)
    else:
        weights = ema.size * ema / ema.sum()
        weights = np.clip(weights, *WEIGHT_CLIP)
    return TransferabilityState(ema, weights, max(0, state.warmup_remaining - 1))


def weighted_conditional_loss(losses, weights) -> float:
    losses = np.asarray(losses, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if losses.shape != weights.shape:
        raise ValueError(f"{losses.shape} losses vs {weights.shape} weights")
    return float(np.sum(weights * losses))


# -- H-divergence ----------------------------------------------------------------

@dataclass
class ProbeConfig:
    steps: int = 500
    lr: float = 0.01
    train_frac: float = 0.8
    max_per_domain: int = 512


@dataclass
class HDivergenceEstimate:
    d: float
    eps_source: float
    eps_target: float
    scope: str                 # "marginal" or "class-<k>"
    n_source: int = 0
    n_target: int = 0

    def to_json(self) -> str:
        return json.dumps({"d": self.d, "eps_source": self.eps_source,
                           "eps_target": self.eps_target, "scope": self.scope,
                           "n_source": self.n_source, "n_target": self.n_target},
                          sort_keys=True)


def h_divergence_from_errors(eps_source: float, eps_target: float) -> float:
    return float(np.clip(2.0 * (1.0 - (eps_source + eps_target)), 0.0, 2.0))


def _probe_outputs(params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    g = Graph()
    p = {name: g.param(name, v, requires_grad=False) for name, v in params.items()}
    build_domain_classifier(g, p, g.const(x), "probe")
    return g.evaluate().data


def estimate_h_divergence(features_s: np.ndarray, features_t: np.ndarray,
                          probe: ProbeConfig | None = None, seed: int = 0,
                          scope: str = "marginal") -> HDivergenceEstimate:
    """Train a fresh probe classifier and report d = 2(1 - (eps_s + eps_t)).

    Each domain is split train/test (seeded); the probe (same architecture
    as the domain classifiers) is trained with full-batch gradient steps on
    the train split; eps are held-out misclassification rates, clamped into
    d in [0, 2].
    """
    probe = probe or ProbeConfig()
    fs, ft = _flatten_cells(features_s), _flatten_cells(features_t)
    if fs.shape[0] < MIN_PROBE_VECTORS or ft.shape[0] < MIN_PROBE_VECTORS:
        raise ValueError(
            f"need >= {MIN_PROBE_VECTORS} vectors per domain, got "
            f"{fs.shape[0]} source / {ft.shape[0]} target")
    rng = make_rng(seed, "hdiv-probe")

    def split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.permutation(x.shape[0])[:probe.max_per_domain]
        n_train = max(1, min(idx.size - 1, int(round(probe.train_frac * idx.size))))
        return x[idx[:n_train]], x[idx[n_train:]]

    train_s, test_s = split(fs)
    train_t, test_t = split(ft)

    params = init_domain_classifier(fs.shape[1], rng, "probe")
    g = Graph()
    pnodes = {name: g.placeholder(name, shape=v.shape, requires_grad=True)
              for name, v in params.items()}
    ds = build_domain_classifier(g, pnodes, g.const(train_s), "probe")
    dt = build_domain_classifier(g, pnodes, g.const(train_t), "probe")
    build_domain_bce(g, ds, dt)
    for _ in range(probe.steps):
        g.evaluate({name: Tensor(v, requires_grad=True) for name, v in params.items()})
        grads = g.backward()
        for name in params:
            params[name] = params[name] - probe.lr * grads[name].data

    eps_s = float(np.mean(_probe_outputs(params, test_s) <= 0.5))
    eps_t = float(np.mean(_probe_outputs(params, test_t) > 0.5))
    return HDivergenceEstimate(h_divergence_from_errors(eps_s, eps_t), eps_s, eps_t,
                               scope, n_source=fs.shape[0], n_target=ft.shape[0])
