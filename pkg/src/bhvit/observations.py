"""Desk-scale experiments on attention entropy, residual gradients and Adam scaling.

Each experiment returns a list of flat dict rows; :func:`write_csv` stores them.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from scipy import stats

from . import autograd as ag
from .autograd import Tensor, custom_grad
from .errors import DomainError
from .quantizers import sign, weight_scale, weight_ste_mask
from .training import adam_factor, adam_factor_limit


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


# -- attention-row entropy ---------------------------------------------------------
def gaussian_entropy(sigma: float) -> float:
    """Differential entropy ``0.5 * ln(2 pi e sigma^2)``."""
    return 0.5 * math.log(2 * math.pi * math.e * sigma * sigma)


def softmax_entropy(x: np.ndarray) -> np.ndarray:
    """Entropy of ``softmax(x)`` along the last axis, computed stably."""
    z = x - x.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def sample_logits(rng: np.random.Generator, k: int, d: int, p: float, trials: int, scale: float) -> np.ndarray:
    """``scale * (2t - d)`` with ``t ~ Binomial(d, p)``, i.e. a sum of ``d`` +-1 products."""
    t = rng.binomial(d, p, size=(trials, k))
    return scale * (2.0 * t - d)


def entropy_experiment(ks=(20, 200, 2000), d: int = 256, p: float = 0.5, trials: int = 1000,
                       logit_scale: float | None = None, seed: int = 0) -> list[dict]:
    """Softmax entropy of rows of ``k`` binary similarity scores versus ``ln k``.

    ``logit_scale`` multiplies the raw +-1 sums; the default ``1/d`` keeps
    scores in ``[-1, 1]``. The prediction is ``ln k + mu + sigma^2/2 - mu_s``
    with ``mu``, ``sigma^2`` the population moments of the scaled score and
    ``mu_s`` the softmax-weighted mean measured on each sample.
    """
    if d < 16:
        raise DomainError(f"d must be >= 16, got {d}")
    scale = 1.0 / d if logit_scale is None else float(logit_scale)
    rng = np.random.default_rng(seed)
    mu = scale * d * (2 * p - 1)
    sigma2 = scale * scale * 4 * d * p * (1 - p)
    rows = []
    for k in ks:
        if k < 2:
            raise DomainError(f"k must be >= 2, got {k}")
        x = sample_logits(rng, k, d, p, trials, scale)
        h = softmax_entropy(x)
        z = x - x.max(axis=-1, keepdims=True)
        w = np.exp(z)
        mu_s = (w * x).sum(axis=-1) / w.sum(axis=-1)
        predicted = math.log(k) + mu + sigma2 / 2 - mu_s
        h_mean = float(h.mean())
        p_mean = float(predicted.mean())
        rows.append({
            "k": k, "d": d, "p": p, "logit_scale": scale, "trials": trials,
            "mu": mu, "sigma2": sigma2, "mu_s": float(mu_s.mean()),
            "entropy": h_mean, "predicted": p_mean, "ln_k": math.log(k),
            "ratio": h_mean / math.log(k),
            "gap": abs(p_mean - h_mean) / h_mean,
            "max_entropy_excess": float((h - math.log(k)).max()),
        })
    return rows


# -- DeMoivre-Laplace ---------------------------------------------------------------
def demoivre_check(ds=(16, 64, 256), p: float = 0.5, samples: int = 20000, seed: int = 0) -> list[dict]:
    """Distance of ``2 * Binomial(d, p) - d`` from its fitted normal, per ``d``."""
    rng = np.random.default_rng(seed)
    rows = []
    for d in ds:
        x = 2.0 * rng.binomial(d, p, size=samples) - d
        mu, sd = float(x.mean()), float(x.std(ddof=1))
        raw = stats.kstest(x, "norm", args=(mu, sd)).statistic
        rows.append({"d": d, "p": p, "samples": samples, "mean": mu, "std": sd, "ks": float(raw)})
    return rows


# -- residual gradients -------------------------------------------------------------
# entries this small are analytic zeros blurred by float64 roundoff in the softmax backward
ZERO_TOL = 1e-12


def zero_fraction(jac: np.ndarray) -> float:
    return float(np.mean(np.abs(jac) <= ZERO_TOL))


def _sign_ste(x: Tensor) -> Tensor:
    """sign with straight-through window ``|x| <= 1``."""
    return custom_grad(lambda v: sign(v), lambda g, v: (g * (np.abs(v) <= 1),))(x)


def _round_attention(a: Tensor) -> Tensor:
    """round(A) with straight-through window ``0.5 <= A <= 1``."""
    return custom_grad(lambda v: np.round(v), lambda g, v: (g * ((v >= 0.5) & (v <= 1)),))(a)


def _binary_linear(xb: Tensor, w: Tensor) -> Tensor:
    signs = custom_grad(lambda v: sign(v), lambda g, v: (g * weight_ste_mask(v),))(w)
    return ag.matmul(xb, signs) * weight_scale(w.data)


def attention_chain(xb: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                    shortcut: bool) -> tuple[Tensor, Tensor]:
    """Binary single-head attention ``Y = round(A) V_b (+ Q)``; returns ``(Y, W_q)``."""
    d = xb.shape[-1]
    wq_t = Tensor(wq, requires_grad=True)
    x = ag.as_tensor(xb)
    q = _binary_linear(x, wq_t)
    with ag.no_grad():
        k = _binary_linear(x, ag.as_tensor(wk))
        v = _binary_linear(x, ag.as_tensor(wv))
    kb, vb = sign(k.data), sign(v.data)
    m = ag.matmul(_sign_ste(q), ag.as_tensor(kb.T))
    a = ag.softmax(m * (1.0 / math.sqrt(d)), axis=-1)
    y = ag.matmul(_round_attention(a), ag.as_tensor(vb))
    if shortcut:
        y = y + q
    return y, wq_t


def residual_jacobian(xb, wq, wk, wv, shortcut: bool) -> np.ndarray:
    """``J[l, i, j] = dY[l, i] / dW_q[j, i]`` by one reverse pass per output element."""
    t, d = xb.shape
    jac = np.zeros((t, d, d), dtype=np.float64)
    with ag.default_dtype(np.float64):
        for l in range(t):
            for i in range(d):
                y, w = attention_chain(xb, wq, wk, wv, shortcut)
                up = np.zeros(y.shape)
                up[l, i] = 1.0
                y.backward(up)
                jac[l, i] = w.grad[:, i]
    return jac


def residual_jacobian_by_hand(xb, wq, wk, wv, shortcut: bool) -> np.ndarray:
    """The same Jacobian written out link by link with the full softmax derivative."""
    xb = np.asarray(xb, dtype=np.float64)
    t, d = xb.shape

    def lin(w):
        return xb @ sign(w) * weight_scale(w)

    q, k, v = lin(wq), lin(wk), lin(wv)
    qb, kb, vb = sign(q), sign(k), sign(v)
    a_full = qb @ kb.T / math.sqrt(d)
    a_full = np.exp(a_full - a_full.max(axis=-1, keepdims=True))
    att = a_full / a_full.sum(axis=-1, keepdims=True)
    ste_a = ((att >= 0.5) & (att <= 1)).astype(np.float64)
    ste_q = (np.abs(q) <= 1).astype(np.float64)
    alpha = weight_scale(wq)
    mask = weight_ste_mask(wq)
    jac = np.zeros((t, d, d))
    for l in range(t):
        kbar = att[l] @ kb  # softmax-weighted mean key, [d]
        for i in range(d):
            da_dq = att[l] * (kb[:, i] - kbar[i]) / math.sqrt(d)
            g = float(np.sum(vb[:, i] * ste_a[l] * da_dq))
            dy_dq = (1.0 if shortcut else 0.0) + g * ste_q[l, i]
            jac[l, i] = dy_dq * xb[l] * alpha[i] * mask[:, i]
    return jac


def sample_attention_inputs(rng: np.random.Generator, t: int, d: int, weight_range: float = 1.2):
    xb = np.where(rng.random((t, d)) < 0.5, -1.0, 1.0)
    ws = [rng.uniform(-weight_range, weight_range, (d, d)) for _ in range(3)]
    return xb, *ws


def residual_gradient_experiment(t: int = 4, d: int = 8, trials: int = 100, seed: int = 0,
                                 weight_range: float = 1.2) -> list[dict]:
    """Fraction of exactly-zero Jacobian entries with and without the ``Q`` shortcut."""
    if t > 8 or d > 16:
        raise DomainError("keep the instance tiny: t <= 8, d <= 16")
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(trials):
        xb, wq, wk, wv = sample_attention_inputs(rng, t, d, weight_range)
        j_with = residual_jacobian(xb, wq, wk, wv, True)
        j_without = residual_jacobian(xb, wq, wk, wv, False)
        rows.append({
            "trial": trial, "t": t, "d": d,
            "zero_with": zero_fraction(j_with),
            "zero_without": zero_fraction(j_without),
        })
    return rows


# -- Adam factor -------------------------------------------------------------------
def adam_factor_curve(t_max: int = 10000, beta1: float = 0.9, beta2: float = 0.999) -> list[dict]:
    """``(t, factor)`` for ``t = 1..t_max``.

    The factor first dips (``1.11`` at ``t=1`` down to about ``0.535`` near
    ``t=12``, while the first-moment sum saturates faster than the second)
    and then rises monotonically to its plateau.
    """
    if t_max < 5000:
        raise DomainError("t_max must be >= 5000 to show the plateau")
    t = np.arange(1, t_max + 1, dtype=np.float64)
    s1 = beta1 * (1 - beta1**t) / (1 - beta1)
    s2 = beta2 * (1 - beta2**t) / (1 - beta2)
    curve = np.sqrt(s2) / s1
    t_min = int(np.argmin(curve))
    if not np.all(np.diff(curve[t_min:]) > 0):
        raise DomainError("factor curve is not increasing after its minimum")
    if abs(adam_factor(5000, beta1, beta2) - adam_factor_limit(beta1, beta2)) > 0.02:
        raise DomainError("factor has not reached its plateau by t = 5000")
    return [{"t": int(i), "factor": float(f)} for i, f in zip(t, curve)]


EXPERIMENTS = {
    "entropy": entropy_experiment,
    "demoivre": demoivre_check,
    "gradient": residual_gradient_experiment,
    "adam": adam_factor_curve,
}
