"""Loss terms for the model zoo.

Image terms are means over pixels and batch.  Divergences are averaged over
the batch and either summed (``reduction="sum"``) or averaged
(``reduction="mean"``) over code elements.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateMixture, ShapeMismatch
from .net import make_generator


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def ae_loss(x, x_hat):
    """Mean absolute deviation between image and reconstruction."""
    _same_shape(x, x_hat)
    return (x - x_hat).abs().mean()


REDUCTIONS = ("sum", "mean")


def _reduce_code(t, reduction):
    # t is (n, code elements...) -> (n,)
    flat = t.flatten(1)
    if reduction == "sum":
        return flat.sum(1)
    if reduction == "mean":
        return flat.mean(1)
    raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def kl_to_standard_normal(mu, logvar, reduction="sum"):
    """KL(N(mu, exp(logvar)) || N(0, I)) over code elements, batch-averaged."""
    per = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)
    return _reduce_code(per, reduction).mean()


def vae_loss(x, x_hat, mu, logvar, lambda_kl=1.0, reduction="sum"):
    return ae_loss(x, x_hat) + lambda_kl * kl_to_standard_normal(mu, logvar, reduction)


def constrained_loss_term(z, z_of_x_hat):
    """Mean squared deviation between the code of x and the code of its reconstruction."""
    _same_shape(z, z_of_x_hat)
    return (z - z_of_x_hat).pow(2).mean()


# ---------------------------------------------------------------------------
# context corruption


def corrupt_pixels(pixels, masks, seed, n_patches=(1, 3), patch_size=(16, 32)):
    """Zero 1-3 random rectangles per slice, centred on brain pixels if any.

    ``patch_size`` is given for 128 px slices and scaled with the slice size.
    Returns ``(corrupted, patch_mask)`` as numpy arrays shaped like ``pixels``.
    """
    pixels = np.asarray(pixels)
    n, H, W = pixels.shape[:3]
    scale = H / 128.0
    lo = max(1, int(round(patch_size[0] * scale)))
    hi = max(lo, int(round(patch_size[1] * scale)))
    rng = np.random.default_rng(seed)
    patch = np.zeros((n, H, W), dtype=bool)
    for i in range(n):
        k = int(rng.integers(n_patches[0], n_patches[1] + 1)) if n_patches[1] > 0 else 0
        brain = np.argwhere(masks[i, :, :, 0]) if masks is not None else np.empty((0, 2))
        for _ in range(k):
            h = int(rng.integers(lo, hi + 1))
            w = int(rng.integers(lo, hi + 1))
            if len(brain):
                cy, cx = brain[rng.integers(len(brain))]
            else:
                cy, cx = rng.integers(H), rng.integers(W)
            y0 = int(np.clip(cy - h // 2, 0, H - h))
            x0 = int(np.clip(cx - w // 2, 0, W - w))
            patch[i, y0:y0 + h, x0:x0 + w] = True
    out = pixels.copy()
    out[patch[..., None].repeat(pixels.shape[3], axis=3)] = 0
    return out, patch[..., None]


def context_corrupt(batch, seed, n_patches=(1, 3), patch_size=(16, 32)):
    """Return a copy of a SliceBatch with random patches zeroed."""
    from dataclasses import replace

    corrupted, _ = corrupt_pixels(batch.pixels, batch.masks, seed, n_patches, patch_size)
    return replace(batch, pixels=corrupted)


# ---------------------------------------------------------------------------
# adversarial terms


def gradient_penalty(critic, real, fake, seed=None):
    """One-sided penalty E[max(0, |grad c(x_mix)| - 1)^2] on random interpolates.

    Zero whenever the critic is 1-Lipschitz along the interpolates, in
    particular for a constant critic.
    """
    g = make_generator(seed)
    eps_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    eps = torch.rand(eps_shape, generator=g, dtype=real.dtype)
    mix = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    out = critic(mix)
    if not out.requires_grad:
        return torch.zeros((), dtype=real.dtype)
    (grad,) = torch.autograd.grad(out.sum(), mix, create_graph=True, allow_unused=True)
    if grad is None:
        return out.sum() * 0.0
    norm = grad.flatten(1).norm(2, dim=1)
    return F.relu(norm - 1.0).pow(2).mean()


def wgan_losses(critic, real_batch, fake_batch, lambda_gp=10.0, seed=None):
    """Wasserstein critic and generator losses.

    ``critic_loss = mean c(fake) - mean c(real) + lambda_gp * GP`` and
    ``generator_loss = -mean c(fake)``.  Detach ``fake_batch`` yourself when
    only the critic should receive gradients.
    """
    c_real = critic(real_batch)
    c_fake = critic(fake_batch)
    gp = gradient_penalty(critic, real_batch, fake_batch, seed)
    critic_loss = c_fake.mean() - c_real.mean() + lambda_gp * gp
    generator_loss = -c_fake.mean()
    return critic_loss, generator_loss


def aae_adversarial_step(latent_critic, codes_real_prior, codes_from_encoder,
                         lambda_gp=10.0, seed=None):
    """Latent critic loss and the encoder regularizer that replaces the KL term."""
    critic_loss, _ = wgan_losses(
        latent_critic, codes_real_prior, codes_from_encoder.detach(), lambda_gp, seed
    )
    encoder_reg = -latent_critic(codes_from_encoder).mean()
    return critic_loss, encoder_reg


def anovaegan_loss(x, x_hat, mu, logvar, critic, lambda_kl=1.0, lambda_adv=1e-2,
                   lambda_gp=10.0, seed=None, reduction="sum"):
    """Component losses of the VAE-GAN.

    ``encoder_decoder`` is what the VAE parameters minimise; ``critic`` is the
    Wasserstein critic loss on real images versus detached reconstructions.
    """
    vae = vae_loss(x, x_hat, mu, logvar, lambda_kl, reduction)
    generator = -critic(x_hat).mean()
    critic_loss, _ = wgan_losses(critic, x, x_hat.detach(), lambda_gp, seed)
    return {
        "vae": vae,
        "generator": generator,
        "encoder_decoder": vae + lambda_adv * generator,
        "critic": critic_loss,
    }


# ---------------------------------------------------------------------------
# Gaussian mixture prior


def _code_vectors(t):
    # dense (n, D) stays; spatial (n, h, w, C) -> (n, h*w, C)
    if t.dim() == 2:
        return t.unsqueeze(1)
    return t.reshape(t.shape[0], -1, t.shape[-1])


def gaussian_kl(mu, logvar, m, logv):
    """KL(N(mu, e^logvar) || N(m, e^logv)) summed over the last dim (broadcasting)."""
    return 0.5 * (logv - logvar + (logvar.exp() + (mu - m).pow(2)) / logv.exp() - 1.0).sum(-1)


def mixture_kl(mu, logvar, mixture_params, reduction="sum"):
    """KL of a diagonal Gaussian posterior against a Gaussian-mixture prior.

    Uses the variational bound ``sum_k r_k (KL_k + log r_k - log pi_k)`` with
    responsibilities ``r = softmax(log pi - KL_k)``, which makes the bound
    tight (``-logsumexp(log pi - KL_k)``) and non-negative.  A categorical
    regulariser ``KL(mean r || uniform)`` keeps components in use.

    Returns ``(kl, uniformity, responsibilities)``; ``kl`` is summed over code
    locations and averaged over the batch.  ``reduction="mean"`` divides by
    the number of code elements, matching ``kl_to_standard_normal``.
    """
    means, logvars, logits = mixture_params
    weights = torch.softmax(logits, dim=0)
    if bool(torch.any(weights <= torch.finfo(weights.dtype).tiny)):
        raise DegenerateMixture("a mixture weight underflowed to zero")
    log_pi = torch.log_softmax(logits, dim=0)
    mu_v = _code_vectors(mu).unsqueeze(2)          # (n, L, 1, D)
    lv_v = _code_vectors(logvar).unsqueeze(2)
    kl_k = gaussian_kl(mu_v, lv_v, means, logvars)  # (n, L, K)
    scores = log_pi - kl_k
    resp = torch.softmax(scores, dim=-1)
    kl = -torch.logsumexp(scores, dim=-1)           # (n, L)
    kl = kl.sum(1).mean()
    if reduction == "mean":
        kl = kl / mu[0].numel()
    elif reduction != "sum":
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    mean_resp = resp.reshape(-1, resp.shape[-1]).mean(0)
    K = mean_resp.numel()
    uniformity = (mean_resp * (torch.log(mean_resp.clamp_min(1e-30)) + math.log(K))).sum()
    return kl, uniformity, resp


def gmvae_loss(x, x_hat, mu, logvar, mixture_params, lambda_kl=1.0, reduction="sum"):
    kl, uniformity, _ = mixture_kl(mu, logvar, mixture_params, reduction)
    return ae_loss(x, x_hat) + lambda_kl * (kl + uniformity)


def standard_normal_mixture(dim, dtype=torch.float32):
    """Single-component mixture equal to N(0, I); reduces gmvae_loss to vae_loss."""
    return (torch.zeros(1, dim, dtype=dtype), torch.zeros(1, dim, dtype=dtype),
            torch.zeros(1, dtype=dtype))
