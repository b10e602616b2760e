"""Gradient angles between objectives and the angle-gated loss weight."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .tensor import Tape, Tensor

DEFAULT_GAMMA_THRES = 90.0
ZERO_NORM = 1e-12


class ZeroGradientError(ValueError):
    """A gradient vector has (near-)zero norm, so its direction is undefined."""


def flatten_grads(model, scope: str = "all") -> np.ndarray:
    """Concatenate parameter gradients in registration order, row-major."""
    parts = []
    for name in model.param_names(scope):
        g = model.params[name].grad
        if g is None:
            raise ValueError(f"no gradient for {name}; run backward first")
        parts.append(g.reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def grad_angle(g_a: np.ndarray, g_b: np.ndarray) -> tuple[float, float]:
    """Return (cos gamma, gamma in degrees) between two flat gradients."""
    g_a = np.asarray(g_a, dtype=np.float64).reshape(-1)
    g_b = np.asarray(g_b, dtype=np.float64).reshape(-1)
    if g_a.shape != g_b.shape:
        raise ValueError(f"gradient lengths differ: {g_a.size} vs {g_b.size}")
    na, nb = np.linalg.norm(g_a), np.linalg.norm(g_b)
    if na <= ZERO_NORM or nb <= ZERO_NORM:
        raise ZeroGradientError("zero-norm gradient")
    cos = float(np.clip(np.dot(g_a, g_b) / (na * nb), -1.0, 1.0))
    return cos, math.degrees(math.acos(cos))


def acl_grad_gate(gamma_deg: float, lam: float, gamma_thres: float = DEFAULT_GAMMA_THRES) -> float:
    """Keep ``lam`` when the angle is within the threshold, else drop the term."""
    return lam if gamma_deg <= gamma_thres else 0.0


@dataclass
class GradReport:
    g_ce: np.ndarray
    g_acl: np.ndarray
    cos_gamma: float | None
    gamma_deg: float | None
    gated: bool
    lambda_prime: float
    param_scope: str

    def record(self, **extra) -> dict:
        """JSON-ready summary without the gradient vectors."""
        d = {"cos_gamma": self.cos_gamma, "gamma_deg": self.gamma_deg, "gated": self.gated,
             "lambda_prime": self.lambda_prime, "param_scope": self.param_scope}
        d.update(extra)
        return d


def gated_step_grads(model, tape: Tape, ce: Tensor, acl: Tensor, lam: float,
                     gamma_thres: float | None = DEFAULT_GAMMA_THRES,
                     scope: str = "all") -> tuple[GradReport, dict[str, np.ndarray]]:
    """Differentiate both objectives over one forward pass and mix the gradients.

    With ``gamma_thres=None`` the angle is still measured but never gates.
    The final gradient is ``(1 - lam') g_ce + lam' g_acl``; when ``lam'`` is 0
    it is the CE gradient itself. If the contrastive gradient vanishes the
    angle is undefined and no gating happens.
    """
    names = model.param_names(scope)
    params = [model.params[n] for n in names]

    model.zero_grad()
    tape.backward(ce, retain_graph=True)
    g_ce = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in zip(names, params)}
    model.zero_grad()
    tape.backward(acl)
    g_acl = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in zip(names, params)}
    model.zero_grad()

    flat_ce = np.concatenate([g_ce[n].reshape(-1) for n in names])
    flat_acl = np.concatenate([g_acl[n].reshape(-1) for n in names])
    try:
        cos, gamma = grad_angle(flat_ce, flat_acl)
    except ZeroGradientError:
        cos = gamma = None
    gated = gamma is not None and gamma_thres is not None and gamma > gamma_thres
    lam_prime = 0.0 if gated else lam

    if lam_prime == 0.0:
        final = g_ce
    else:
        final = {n: (1.0 - lam_prime) * g_ce[n] + lam_prime * g_acl[n] for n in names}
    report = GradReport(flat_ce, flat_acl, cos, gamma, gated, lam_prime, scope)
    return report, final


@dataclass
class AngleHistogram:
    edges: list[float]
    counts: list[int]
    mean: float
    std: float
    gated_fraction: float
    n_reports: int
    n_undefined: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def angle_histogram(reports: Iterable, bins: int = 36) -> AngleHistogram:
    """Fixed-width histogram over [0, 180] degrees.

    Accepts :class:`GradReport` objects or their dict records. Reports with an
    undefined angle are counted separately and excluded from the moments.
    """
    gammas, gated, n = [], 0, 0
    undefined = 0
    for r in reports:
        rec = r.record() if isinstance(r, GradReport) else r
        n += 1
        gated += bool(rec["gated"])
        if rec["gamma_deg"] is None:
            undefined += 1
        else:
            gammas.append(float(rec["gamma_deg"]))
    if n == 0:
        raise ValueError("empty report stream")
    edges = np.linspace(0.0, 180.0, bins + 1)
    counts, _ = np.histogram(gammas, bins=edges)
    arr = np.asarray(gammas)
    return AngleHistogram(
        edges=edges.tolist(),
        counts=counts.astype(int).tolist(),
        mean=float(arr.mean()) if arr.size else float("nan"),
        std=float(arr.std()) if arr.size else float("nan"),
        gated_fraction=gated / n,
        n_reports=n,
        n_undefined=undefined,
    )
