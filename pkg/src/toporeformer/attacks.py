"""White-box and adaptive attacks against a classifier or a purified pipeline.

A :class:`TargetFn` bundles the classifier, an optional purifier and the
gradient policy the attacker uses:

``true``      differentiate through the whole composition
``bpda``      run the purifier forward, treat it as identity backward
``eot``       average true gradients over K draws of purifier noise
``eot_bpda``  average BPDA gradients over K draws of purifier noise
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import LengthMismatch, NonFinite
from .models import argmax_lowest, save_weights

POLICIES = ("true", "bpda", "eot", "eot_bpda")
ATTACK_KINDS = ("none", "fgsm", "pgd", "cw", "bpda_pgd", "eot_pgd", "eot_bpda_pgd")
_KIND_POLICY = {"bpda_pgd": "bpda", "eot_pgd": "eot", "eot_bpda_pgd": "eot_bpda"}


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    eps: float = 0.1
    alpha: float | None = None  # PGD step; None means eps / 4
    steps: int = 40
    c: float = 10.0
    kappa: float = 0.0
    cw_lr: float = 0.01
    eot_samples: int = 8
    seed: int = 0
    random_start: bool = True
    # "target": white-box against the evaluated composition; "classifier":
    # crafted on the bare classifier and then fed through the defense
    craft_on: str = "target"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be at least 1")
        if self.kind == "cw" and self.c <= 0:
            raise ValueError("C&W needs c > 0")
        if self.craft_on not in ("target", "classifier"):
            raise ValueError(f"craft_on must be 'target' or 'classifier', got {self.craft_on!r}")
        if self.craft_on == "classifier" and self.kind in _KIND_POLICY:
            raise ValueError(f"{self.kind} models the purifier, so it cannot be crafted on the classifier")

    @property
    def step_size(self) -> float:
        return self.eps / 4 if self.alpha is None else self.alpha

    def params(self) -> dict:
        """The parameters that matter for this kind, for reports."""
        d = asdict(self)
        kind = d.pop("kind")
        keep = {
            "none": (),
            "fgsm": ("eps",),
            "cw": ("c", "kappa", "cw_lr", "steps"),
        }.get(kind, ("eps", "alpha", "steps", "seed", "random_start"))
        out = {k: d[k] for k in keep}
        if "alpha" in out:
            out["alpha"] = self.step_size
        if kind in ("eot_pgd", "eot_bpda_pgd"):
            out["eot_samples"] = self.eot_samples
        if self.craft_on != "target":
            out["craft_on"] = self.craft_on
        return out


@dataclass
class TargetFn:
    """``x -> logits`` with an explicit gradient policy.

    ``purifier(x, noise)`` maps a tensor batch to purified images and may be
    recorded on a tape; ``noise_dim`` is the width of its per-example noise
    (0 for deterministic purifiers). ``sample_noise`` makes plain forward
    passes draw noise instead of using zeros.
    """

    classifier: object
    purifier: Callable | None = None
    noise_dim: int = 0
    policy: str = "true"
    eot_samples: int = 1
    sample_noise: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown gradient policy {self.policy!r}")

    def with_policy(self, policy: str, eot_samples: int | None = None, sample_noise=None) -> TargetFn:
        return replace(
            self,
            policy=policy,
            eot_samples=self.eot_samples if eot_samples is None else eot_samples,
            sample_noise=self.sample_noise if sample_noise is None else sample_noise,
        )

    def zero_noise(self, n: int) -> np.ndarray | None:
        return np.zeros((n, self.noise_dim)) if self.noise_dim else None

    def draw_noise(self, n: int, *key: int) -> np.ndarray | None:
        if not self.noise_dim:
            return None
        return np.random.default_rng(list(key)).standard_normal((n, self.noise_dim))

    def purify(self, x, noise=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.purifier is None:
            return x
        if noise is None:
            noise = self.zero_noise(x.shape[0])
        return self.purifier(x, noise)

    def logits(self, x, noise=None) -> Tensor:
        return self.classifier.forward(self.purify(x, noise))

    def predict(self, x, seed: int = 0, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = []
        for b, s in enumerate(range(0, len(x), batch_size)):
            xb = x[s:s + batch_size]
            noise = self.draw_noise(len(xb), seed, b, -1) if self.sample_noise else None
            out.append(argmax_lowest(self.logits(xb, noise).data))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


LossFn = Callable[[Tensor], Tensor]


def ce_loss(y) -> LossFn:
    """Summed cross-entropy so per-example gradients ignore batch size."""
    y = np.asarray(y)
    return lambda logits: ad.softmax_cross_entropy(logits, y) * float(len(y))


def _check_finite(g: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise NonFinite("attack gradient contains NaN or Inf")
    return g


def true_gradient(target: TargetFn, x, loss_fn: LossFn, noise=None) -> tuple[np.ndarray, np.ndarray]:
    """(logits, dloss/dx) through the full composition."""
    with Tape() as tape:
        xt = tape.leaf(x)
        logits = target.classifier.forward(target.purify(xt, noise))
        loss = loss_fn(logits)
    (g,) = tape.gradients(loss, [xt])
    return logits.data, _check_finite(g)


def surrogate_gradient(target: TargetFn, x, loss_fn: LossFn, noise=None) -> tuple[np.ndarray, np.ndarray]:
    """(logits, dloss/du at u = purify(x)): the purifier's Jacobian is replaced by identity."""
    u = target.purify(np.asarray(x), noise).data
    with Tape() as tape:
        ut = tape.leaf(u)
        logits = target.classifier.forward(ut)
        loss = loss_fn(logits)
    (g,) = tape.gradients(loss, [ut])
    return logits.data, _check_finite(g)


def bpda_gradient(target: TargetFn, x, y, noise=None) -> np.ndarray:
    return surrogate_gradient(target, x, ce_loss(y), noise)[1]


def eot_gradient(target: TargetFn, x, y, samples: int, seed: int, surrogate: bool = False,
                 step: int = 0, loss_fn: LossFn | None = None) -> np.ndarray:
    """Mean gradient over ``samples`` purifier noise draws.

    Draw ``k`` uses the stream keyed by ``(seed, step, k)``.
    """
    return _eot(target, np.asarray(x), loss_fn or ce_loss(y), samples, seed, step, surrogate)[1]


def _eot(target, x, loss_fn, samples, seed, step, surrogate):
    grad_fn = surrogate_gradient if surrogate else true_gradient
    logit_sum = grad_sum = None
    for k in range(samples):
        noise = target.draw_noise(len(x), seed, step, k)
        logits, g = grad_fn(target, x, loss_fn, noise)
        logit_sum = logits if logit_sum is None else logit_sum + logits
        grad_sum = g if grad_sum is None else grad_sum + g
    return logit_sum / samples, grad_sum / samples


def attack_gradient(target: TargetFn, x, loss_fn: LossFn, seed: int = 0, step: int = 0):
    """(logits, gradient) under the target's policy."""
    if target.policy == "true":
        return true_gradient(target, x, loss_fn)
    if target.policy == "bpda":
        return surrogate_gradient(target, x, loss_fn)
    return _eot(target, np.asarray(x), loss_fn, target.eot_samples, seed, step,
                surrogate=target.policy == "eot_bpda")


# ------------------------------------------------------------------ attacks


def fgsm(target: TargetFn, x, y, eps: float, seed: int = 0) -> np.ndarray:
    """One signed-gradient step of size ``eps``, clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    _, g = attack_gradient(target, x, ce_loss(y), seed, 0)
    return _project(x + eps * np.sign(g), x, eps)


def _project(x_adv, x, eps):
    """Nearest point of the eps-ball around ``x`` intersected with [0, 1].

    ``x + eps`` can round to a value whose distance from ``x`` exceeds
    ``eps``; such entries are nudged back one ulp at a time so the ball
    constraint holds exactly in floating point.
    """
    out = np.clip(x_adv, x - eps, x + eps)
    bad = np.abs(out - x) > eps
    while bad.any():
        out[bad] = np.nextafter(out[bad], x[bad])
        bad = np.abs(out - x) > eps
    return np.clip(out, 0.0, 1.0)


def pgd(target: TargetFn, x, y, cfg: AttackConfig, on_step: Callable | None = None) -> np.ndarray:
    """L-infinity PGD; every iterate is projected onto the eps-ball and [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    eps, alpha = cfg.eps, cfg.step_size
    x_adv = x.copy()
    if cfg.random_start and eps > 0:
        rng = np.random.default_rng([cfg.seed, 0xA77AC])
        x_adv = _project(x + rng.uniform(-eps, eps, size=x.shape), x, eps)
    loss_fn = ce_loss(y)
    for t in range(cfg.steps):
        _, g = attack_gradient(target, x_adv, loss_fn, cfg.seed, t)
        x_adv = _project(x_adv + alpha * np.sign(g), x, eps)
        assert np.all(np.abs(x_adv - x) <= eps) and x_adv.min() >= 0.0 and x_adv.max() <= 1.0
        if on_step is not None:
            on_step(t, x_adv)
    return x_adv


def _cw_margin_seed(logits: np.ndarray, y: np.ndarray, c: float, kappa: float):
    """Margin ``Z_y - max_{i != y} Z_i`` and its c-scaled logit gradient."""
    n = len(y)
    rows = np.arange(n)
    other = logits.copy()
    other[rows, y] = -np.inf
    runner = np.argmax(other, axis=1)
    margin = logits[rows, y] - logits[rows, runner]
    active = margin > -kappa
    seed = np.zeros_like(logits)
    seed[rows[active], y[active]] = c
    seed[rows[active], runner[active]] -= c
    return margin, seed


def cw_l2(target: TargetFn, x, y, cfg: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    """Untargeted Carlini-Wagner L2 with a tanh change of variables.

    Minimises ``||x_adv - x||^2 + c * max(Z_y - max_{i!=y} Z_i, -kappa)``
    with Adam on ``w``. Returns the lowest-distortion successful iterate per
    example (else the final one) and the success flags.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.arctanh(np.clip(2 * x - 1, -(1 - 1e-6), 1 - 1e-6))
    state = ad.AdamState()
    params = {"w": w}
    best = np.tanh(w) * 0.5 + 0.5
    best_dist = np.full(len(x), np.inf)
    success = np.zeros(len(x), dtype=bool)
    flat = (len(x), -1)

    for t in range(cfg.steps + 1):
        x_adv = np.tanh(params["w"]) * 0.5 + 0.5
        holder = {}

        def loss_fn(logits, holder=holder):
            margin, seed = _cw_margin_seed(logits.data, y, cfg.c, cfg.kappa)
            holder["margin"] = margin
            return ad.total(logits * seed)

        logits, g_logit = attack_gradient(target, x_adv, loss_fn, cfg.seed, t)
        dist = ((x_adv - x) ** 2).reshape(flat).sum(axis=1)
        won = argmax_lowest(logits) != y
        better = won & (dist < best_dist)
        best[better] = x_adv[better]
        best_dist[better] = dist[better]
        success |= won
        if t == cfg.steps:
            break
        g_x = 2.0 * (x_adv - x) + g_logit
        g_w = g_x * 0.5 * (1.0 - np.tanh(params["w"]) ** 2)
        ad.adam_step(params, {"w": g_w}, state, lr=cfg.cw_lr)

    final = np.tanh(params["w"]) * 0.5 + 0.5
    out = np.where(success.reshape(-1, 1, 1, 1), best, final)
    return out, success


def run_attack(target: TargetFn, x, y, cfg: AttackConfig, batch_size: int = 100):
    """Craft adversarial examples for ``cfg.kind``; returns ``(x_adv, success)``.

    ``success`` marks examples the target misclassifies after the attack
    (taken from C&W's own bookkeeping for ``cw``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    policy = _KIND_POLICY.get(cfg.kind, "true")
    sampled = policy in ("eot", "eot_bpda")
    attack_target = target.with_policy(policy, cfg.eot_samples, sample_noise=sampled)
    advs, flags = [], []
    for b, s in enumerate(range(0, len(x), batch_size)):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        bcfg = replace(cfg, seed=int(np.random.SeedSequence([cfg.seed, b]).generate_state(1)[0]))
        if cfg.kind == "none":
            adv = xb.copy()
        elif cfg.kind == "fgsm":
            adv = fgsm(attack_target, xb, yb, cfg.eps, bcfg.seed)
        elif cfg.kind == "cw":
            adv, won = cw_l2(attack_target, xb, yb, bcfg)
            advs.append(adv)
            flags.append(won)
            continue
        else:
            adv = pgd(attack_target, xb, yb, bcfg)
        advs.append(adv)
        flags.append(target.predict(adv) != yb)
    if not advs:
        return x.copy(), np.zeros(0, dtype=bool)
    return np.concatenate(advs), np.concatenate(flags)


def attack_success_rate(clean_pred, adv_pred, y) -> float:
    """Fraction of clean-correct examples that the attack flips; 0/0 is 0."""
    clean_pred, adv_pred, y = (np.asarray(a).ravel() for a in (clean_pred, adv_pred, y))
    if not (len(clean_pred) == len(adv_pred) == len(y)):
        raise LengthMismatch("prediction and label arrays differ in length")
    correct = clean_pred == y
    if not correct.any():
        return 0.0
    return float(np.sum(correct & (adv_pred != y)) / np.sum(correct))


def save_adversarial(path, x_adv, y, cfg: AttackConfig, success) -> Path:
    """TRFM tensor file plus ``<path>.json`` sidecar with config and flags."""
    path = Path(path)
    save_weights(path, {"x_adv": np.asarray(x_adv), "labels": np.asarray(y, dtype=np.float64)})
    sidecar = {"attack": asdict(cfg), "success": [bool(s) for s in success]}
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return side
