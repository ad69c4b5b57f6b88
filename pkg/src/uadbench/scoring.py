"""Anomaly scoring: turn a trained model plus slices into per-pixel scores.

Every scorer works on channels-last slice stacks and returns a *signed*
field; the post-processing chain decides between positive-only and absolute
values.  For reconstruction-type scorers the signed field is ``x - x_hat``,
for gradient saliency it is the (non-negative) saliency itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses as L
from .data import SliceBatch, Volume, _write_nifti, extract_slices, slices_to_volume
from .errors import DivergedRestoration, InvalidN, NoKLTerm, ShapeMismatch
from .net import flush_denormals, latent_dropout, make_generator, reparameterize, sigma_from_logvar

METHODS = ("reconstruction", "mc", "gradient", "restoration")


@dataclass
class ScoreVolume:
    scores: np.ndarray
    source_subject: str
    method: str
    n_samples: Optional[int] = None
    n_iters: Optional[int] = None

    def save(self, directory) -> Path:
        path = Path(directory) / f"scores_{self.method}.nii.gz"
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_nifti(self.scores.astype(np.float32), path)
        return path


def _graph(model):
    return getattr(model, "graph", model)


def _as_tensor(batch):
    pixels = batch.pixels if isinstance(batch, SliceBatch) else batch
    return torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float32)


def _chunks(x, size):
    for i in range(0, x.shape[0], size):
        yield x[i:i + size]


@torch.no_grad()
def _reconstruct(graph, x, chunk=128):
    graph.eval()
    parts = [graph(xb) for xb in _chunks(x, chunk)]
    out = torch.cat(parts) if parts else x.clone()
    if out.shape != x.shape:
        raise ShapeMismatch(f"model output {tuple(out.shape)} != input {tuple(x.shape)}")
    return out


def reconstruction_residual(model, batch, signed=False) -> np.ndarray:
    """``|x - Dec(Enc(x))|``; variational codes use the posterior mean."""
    x = _as_tensor(batch)
    diff = (x - _reconstruct(_graph(model), x)).numpy()
    return diff if signed else np.abs(diff)


@torch.no_grad()
def mc_residual(model, batch, n=100, p_r=0.2, seed=0, signed=False, chunk=128) -> np.ndarray:
    """Mean residual over ``n`` stochastic reconstructions.

    Variational models sample the posterior; deterministic ones apply latent
    dropout with rate ``p_r``.  ``signed=True`` returns ``x - mean(x_hat_n)``.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidN(f"number of samples must be a positive integer, got {n!r}")
    graph = _graph(model)
    graph.eval()
    gen = make_generator(seed)
    x = _as_tensor(batch)
    out = torch.zeros_like(x)
    for i in range(0, x.shape[0], chunk):
        xb = x[i:i + chunk]
        mu, logvar = graph.encode(xb)
        acc = torch.zeros_like(xb)
        for _ in range(n):
            if logvar is not None:
                z = reparameterize(mu, sigma_from_logvar(logvar), gen)
            else:
                z = latent_dropout(mu, p_r, gen)
            x_hat = graph.decode(z)
            acc += (xb - x_hat) if signed else (xb - x_hat).abs()
        out[i:i + chunk] = acc / n
    return out.numpy()


def _elbo_objective(graph, y, lambda_kl, anchor=None, kl_reduction="sum"):
    """Per-slice ``l1(y, Dec(Enc(y))) + lambda_kl * KL``; ``anchor`` swaps the l1 target."""
    mu, logvar = graph.encode(y)
    x_hat = graph.decode(mu)
    target = y if anchor is None else anchor
    rec = (target - x_hat).abs().flatten(1).mean(1)
    kl = L._reduce_code(0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar), kl_reduction)
    return rec + lambda_kl * kl


def _trained_reduction(model):
    cfg = getattr(model, "train_config", None)
    return getattr(cfg, "kl_reduction", "sum")


def _require_kl(graph):
    if not graph.spec.variational:
        raise NoKLTerm("this scorer needs a variational model with a KL term")


def gradient_saliency(model, batch, lambda_kl=1.0, chunk=128, kl_reduction=None) -> np.ndarray:
    """``|d(l1(x, x_hat) + lambda_kl * KL) / dx|`` from one backward pass per chunk.

    The reconstruction term is the per-slice mean, so each slice's saliency
    is the gradient of its own objective.  ``kl_reduction`` defaults to the
    one the model was trained with.
    """
    graph = _graph(model)
    _require_kl(graph)
    kl_reduction = kl_reduction or _trained_reduction(model)
    graph.eval()
    x = _as_tensor(batch)
    out = []
    for xb in _chunks(x, chunk):
        xb = xb.clone().requires_grad_(True)
        objective = _elbo_objective(graph, xb, lambda_kl, kl_reduction=kl_reduction).sum()
        (grad,) = torch.autograd.grad(objective, xb)
        out.append(grad.abs())
    return torch.cat(out).numpy() if out else np.zeros_like(x.numpy())


@flush_denormals
def restore(model, batch, n_iters=500, step_size=5e-3, lambda_kl=1.0,
            fidelity=False, chunk=128, kl_reduction=None):
    """Iteratively move slices towards the model's healthy manifold.

    Starts at ``y = x`` and runs Adam on ``y`` against the per-slice ELBO
    objective, clipping to [0, 1] after every step.  With ``fidelity=True``
    the l1 term compares the reconstruction of ``y`` with the original ``x``
    instead of with ``y``.

    Returns ``(restored, signed_residual, trajectory)`` where ``trajectory``
    has shape ``(n_iters + 1, n_slices)``.
    """
    graph = _graph(model)
    _require_kl(graph)
    kl_reduction = kl_reduction or _trained_reduction(model)
    graph.eval()
    for p in graph.parameters():
        p.requires_grad_(False)
    x = _as_tensor(batch)
    restored, trajectory = [], []
    try:
        for xb in _chunks(x, chunk):
            y = xb.clone().requires_grad_(True)
            opt = torch.optim.Adam([y], lr=step_size)
            anchor = xb if fidelity else None
            traj = []
            for it in range(n_iters + 1):
                obj = _elbo_objective(graph, y, lambda_kl, anchor, kl_reduction)
                traj.append(obj.detach().numpy().copy())
                if not bool(torch.isfinite(obj).all()):
                    raise DivergedRestoration(f"objective became non-finite at iteration {it}")
                if it == n_iters or step_size == 0:
                    continue
                opt.zero_grad()
                obj.sum().backward()
                opt.step()
                with torch.no_grad():
                    y.clamp_(0.0, 1.0)
            restored.append(y.detach())
            trajectory.append(np.stack(traj))
    finally:
        for p in graph.parameters():
            p.requires_grad_(True)
    if not restored:
        return x.numpy(), np.zeros_like(x.numpy()), np.zeros((n_iters + 1, 0))
    y = torch.cat(restored)
    return y.numpy(), (x - y).numpy(), np.concatenate(trajectory, axis=1)


def score_slices(model, batch, method, *, n_samples=100, dropout_rate=0.2, seed=0,
                 lambda_kl=1.0, n_iters=500, step_size=5e-3, fidelity=False) -> np.ndarray:
    """Signed score field for any of the four methods."""
    if method == "reconstruction":
        return reconstruction_residual(model, batch, signed=True)
    if method == "mc":
        return mc_residual(model, batch, n_samples, dropout_rate, seed, signed=True)
    if method == "gradient":
        return gradient_saliency(model, batch, lambda_kl)
    if method == "restoration":
        return restore(model, batch, n_iters, step_size, lambda_kl, fidelity)[1]
    raise ValueError(f"unknown scoring method {method!r}")


def score_volume(model, volume: Volume, method, size: Optional[int] = None, **kwargs) -> ScoreVolume:
    """Score every brain slice of ``volume`` and reassemble a signed 3D field.

    ``size`` is the slice size the model expects; slices are resized to it
    and the scores are resized back to the volume's in-plane grid.
    """
    size = size or _graph(model).spec.input_size
    batch = extract_slices(volume, size)
    signed = score_slices(model, batch, method, **kwargs)[..., 0]
    # slices_to_volume resizes back to the in-plane grid when needed
    field = slices_to_volume(signed.astype(np.float32), batch.provenance, volume.shape)
    return ScoreVolume(
        scores=field,
        source_subject=volume.subject_id,
        method=method,
        n_samples=kwargs.get("n_samples", 100) if method == "mc" else None,
        n_iters=kwargs.get("n_iters", 500) if method == "restoration" else None,
    )
