"""Training objective: time-domain MSE, spectral magnitude loss, MGDA weighting.

Two losses are computed on the same minibatch. ``time_loss`` is the plain
mean squared error on predicted velocities. ``freq_loss`` compares the
magnitude spectra of prediction and target so that high-frequency
content is not traded away for a smooth low-frequency fit. Their
parameter gradients are combined with the closed-form two-task MGDA
weight, which always yields a direction that descends on both.

Everything here works on ``torch`` tensors; array-likes are accepted
and converted on entry.
"""

import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .common import DomainError, ShapeError, format_float, logger

__all__ = [
    "MGDA_EPS_DENOM",
    "DEGENERATE_ALPHA",
    "GRAD_CHECK_MAX_PARAMETERS",
    "LossReport",
    "LossBatch",
    "time_loss",
    "freq_loss",
    "mgda_alpha",
    "combine_gradients",
    "flatten_gradients",
    "update_direction",
    "grad_check",
    "write_loss_csv",
]


MGDA_EPS_DENOM = 1e-12
DEGENERATE_ALPHA = 0.5

GRAD_CHECK_MAX_PARAMETERS = 5000
GRAD_CHECK_FLOOR = 1e-6

LOSS_CSV_HEADER = ["step", "l_time", "l_freq", "alpha", "g_time_norm", "g_freq_norm"]


@dataclass
class LossReport:
    """One training step's losses, MGDA weight and gradient norms."""

    step: int
    l_time: float
    l_freq: float
    alpha: float | None  # None when MGDA is off (static weighted sum)
    g_time_norm: float
    g_freq_norm: float


class LossBatch(NamedTuple):
    """Everything needed to evaluate both losses on one minibatch."""

    x_t: torch.Tensor  # [B, L]
    t: torch.Tensor  # [B]
    text: torch.Tensor  # [B, M, D]
    mask: torch.Tensor  # [B, M] bool
    v_t: torch.Tensor  # [B, L]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ ({tuple(a.shape)} vs {tuple(b.shape)})")


# --- Losses ------------------------------------------------------------------


def time_loss(v_pred, v_t) -> torch.Tensor:
    """Mean squared error over every batch element and time step."""
    v_pred, v_t = _as_tensor(v_pred), _as_tensor(v_t)
    _check_same_shape(v_pred, v_t, "time_loss")
    return torch.mean((v_pred - v_t) ** 2)


def freq_loss(v_pred, v_t) -> torch.Tensor:
    """Mean absolute difference of one-sided magnitude spectra.

    The transform runs per series along the last axis with the
    unnormalised forward convention; the result is the mean over
    frequency bins and then over the batch.
    """
    v_pred, v_t = _as_tensor(v_pred), _as_tensor(v_t)
    _check_same_shape(v_pred, v_t, "freq_loss")
    if v_pred.shape[-1] < 2:
        raise ShapeError(f"freq_loss needs at least 2 time steps, got {v_pred.shape[-1]}")
    mag_pred = torch.abs(torch.fft.rfft(v_pred, dim=-1))
    mag_t = torch.abs(torch.fft.rfft(v_t, dim=-1))
    return torch.mean(torch.abs(mag_pred - mag_t))


# --- MGDA --------------------------------------------------------------------


def _flat_pair(g_time, g_freq) -> tuple[torch.Tensor, torch.Tensor]:
    g_time = _as_tensor(g_time).reshape(-1)
    g_freq = _as_tensor(g_freq).reshape(-1)
    if g_time.numel() != g_freq.numel():
        raise ShapeError(
            f"gradient lengths differ ({g_time.numel()} vs {g_freq.numel()})"
        )
    if g_time.numel() == 0:
        raise ShapeError("gradients are empty")
    return g_time, g_freq


def mgda_alpha(g_time, g_freq) -> float:
    """Closed-form min-norm weight for two gradients, clipped to [0, 1].

    Returns ``DEGENERATE_ALPHA`` when the gradients coincide (any weight
    is then optimal).
    """
    g_time, g_freq = _flat_pair(g_time, g_freq)
    g_time = g_time.detach().to(torch.float64)
    g_freq = g_freq.detach().to(torch.float64)
    diff = g_time - g_freq
    denom = float(torch.dot(diff, diff))
    if denom < MGDA_EPS_DENOM:
        return DEGENERATE_ALPHA
    alpha = float(torch.dot(g_freq - g_time, g_freq)) / denom
    return min(max(alpha, 0.0), 1.0)


def combine_gradients(g_time, g_freq, alpha: float) -> torch.Tensor:
    """``alpha * g_time + (1 - alpha) * g_freq``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    g_time, g_freq = _flat_pair(g_time, g_freq)
    return alpha * g_time + (1.0 - alpha) * g_freq


def flatten_gradients(
    grads: Sequence[torch.Tensor | None], params: Sequence[nn.Parameter]
) -> torch.Tensor:
    """Concatenate per-parameter gradients in parameter order.

    Parameters the loss does not reach (``None`` gradient) contribute zeros
    so both task gradients always share one layout.
    """
    parts = []
    for g, p in zip(grads, params, strict=True):
        parts.append(torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1))
    return torch.cat(parts)


def update_direction(
    g_time: torch.Tensor,
    g_freq: torch.Tensor,
    *,
    mgda_enabled: bool,
    static_lambda: float = 0.0,
) -> tuple[torch.Tensor, float | None]:
    """Pick the descent direction for one step.

    With MGDA on, the two gradients are blended with ``mgda_alpha``.
    With MGDA off, the direction is the gradient of the static sum
    ``L_time + static_lambda * L_freq`` and no alpha is reported.
    """
    if mgda_enabled:
        alpha = mgda_alpha(g_time, g_freq)
        return combine_gradients(g_time, g_freq, alpha), alpha
    if static_lambda < 0:
        raise DomainError(f"static_lambda must be nonnegative, got {static_lambda}")
    g_time, g_freq = _flat_pair(g_time, g_freq)
    if static_lambda == 0.0:
        return g_time.clone(), None
    return g_time + static_lambda * g_freq, None


# --- Gradient check ------------------------------------------------------------


def grad_check(net: nn.Module, batch: LossBatch, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of both losses with central differences.

    Meant for tiny networks in double precision. Every trainable scalar
    is perturbed by ``±epsilon``; the returned value is the maximum
    relative error ``|a - n| / max(|a|, |n|, 1e-6)`` over both losses.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise DomainError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    params = [p for p in net.parameters() if p.requires_grad]
    n_params = sum(p.numel() for p in params)
    if n_params > GRAD_CHECK_MAX_PARAMETERS:
        raise ValueError(
            f"grad_check is for small nets (<= {GRAD_CHECK_MAX_PARAMETERS} "
            f"parameters), got {n_params}"
        )

    def losses() -> tuple[torch.Tensor, torch.Tensor]:
        v_pred = net(batch.x_t, batch.t, batch.text, batch.mask)
        return time_loss(v_pred, batch.v_t), freq_loss(v_pred, batch.v_t)

    l_time, l_freq = losses()
    g_time = torch.autograd.grad(l_time, params, retain_graph=True, allow_unused=True)
    g_freq = torch.autograd.grad(l_freq, params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, gt, gf in zip(params, g_time, g_freq, strict=True):
            flat = p.view(-1)
            gt_flat = torch.zeros(p.numel(), dtype=p.dtype) if gt is None else gt.reshape(-1)
            gf_flat = torch.zeros(p.numel(), dtype=p.dtype) if gf is None else gf.reshape(-1)
            for i in range(flat.numel()):
                original = float(flat[i])
                flat[i] = original + epsilon
                lt_plus, lf_plus = losses()
                flat[i] = original - epsilon
                lt_minus, lf_minus = losses()
                flat[i] = original
                for analytic, plus, minus in (
                    (float(gt_flat[i]), lt_plus, lt_minus),
                    (float(gf_flat[i]), lf_plus, lf_minus),
                ):
                    numeric = float(plus - minus) / (2.0 * epsilon)
                    scale = max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR)
                    worst = max(worst, abs(analytic - numeric) / scale)
    logger.debug(f"grad_check over {n_params} parameters: max relative error {worst:.3e}")
    return worst


# --- CSV export ----------------------------------------------------------------


def write_loss_csv(reports: Iterable[LossReport], path: Path) -> int:
    """Write one row per step. An empty alpha cell means MGDA was off."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_CSV_HEADER)
        for r in reports:
            writer.writerow(
                [
                    r.step,
                    format_float(r.l_time),
                    format_float(r.l_freq),
                    "" if r.alpha is None else format_float(r.alpha),
                    format_float(r.g_time_norm),
                    format_float(r.g_freq_norm),
                ]
            )
            n += 1
    return n
