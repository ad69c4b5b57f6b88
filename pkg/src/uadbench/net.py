"""The shared encoder/decoder used by every model in the zoo.

Images enter and leave channels-last, ``(n, H, W, 1)``.  Dense codes are
``(n, dense_dim)``; spatial codes are ``(n, h, w, C)`` with ``h = H / 16``.
"""
from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointMismatch, InvalidSpec, NonPositiveSigma

CHECKPOINT_FORMAT = "uadbench-checkpoint/1"
LOGVAR_RANGE = (-30.0, 20.0)


@dataclass(frozen=True)
class BottleneckSpec:
    """Architecture description; also embedded verbatim in checkpoints.

    ``critic`` adds an image critic that replicates the encoder topology,
    ``latent_critic`` adds a small fully-connected critic on dense codes.
    """

    kind: str = "dense"
    dense_dim: int = 128
    variational: bool = False
    mixture_components: int = 0
    input_size: int = 128
    channels: tuple = (32, 64, 128, 128)
    kernel_size: int = 5
    critic: bool = False
    latent_critic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in ("dense", "spatial"):
            raise InvalidSpec(f"bottleneck kind must be 'dense' or 'spatial', got {self.kind!r}")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise InvalidSpec("need four positive channel widths")
        n = self.input_size
        if n < 16 or n % 16 or n & (n - 1):
            raise InvalidSpec(f"input_size must be a power of two >= 16, got {n}")
        if self.dense_dim < 1:
            raise InvalidSpec("dense_dim must be positive")
        if self.kernel_size % 2 == 0:
            raise InvalidSpec("kernel_size must be odd")
        if self.mixture_components and not self.variational:
            raise InvalidSpec("a mixture prior needs a variational bottleneck")
        if self.mixture_components == 1:
            raise InvalidSpec("a mixture prior needs at least 2 components")
        if self.latent_critic and self.kind != "dense":
            raise InvalidSpec("the latent critic works on dense codes")

    @property
    def feature_shape(self):
        s = self.input_size // 16
        return (s, s, self.channels[3])

    @property
    def spatial_shape(self):
        return self.feature_shape

    @property
    def code_dim(self):
        """Size of one prior-distributed vector (per location for spatial codes)."""
        return self.dense_dim if self.kind == "dense" else self.channels[3]

    @property
    def code_shape(self):
        return (self.dense_dim,) if self.kind == "dense" else self.feature_shape


def _down(cin, cout, k):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride=2, padding=k // 2), nn.LeakyReLU(0.2))


def _up(cin, cout, k):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, k, stride=2, padding=k // 2, output_padding=1),
        nn.LeakyReLU(0.2),
    )


def _encoder_body(spec):
    c = (1,) + spec.channels
    return nn.Sequential(*[_down(c[i], c[i + 1], spec.kernel_size) for i in range(4)])


class ImageCritic(nn.Module):
    """Encoder replica ending in one scalar per image."""

    def __init__(self, spec: BottleneckSpec):
        super().__init__()
        self.body = _encoder_body(spec)
        h, w, c = spec.feature_shape
        self.head = nn.Linear(h * w * c, 1)

    def features(self, x):
        return self.body(_nchw(x)).flatten(1)

    def forward(self, x):
        return self.head(self.features(x)).squeeze(1)


class LatentCritic(nn.Module):
    def __init__(self, dim, hidden=256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, z):
        return self.net(z).squeeze(1)


class MixturePrior(nn.Module):
    """Learnable Gaussian mixture over code vectors."""

    def __init__(self, components, dim):
        super().__init__()
        self.means = nn.Parameter(torch.randn(components, dim))
        self.logvars = nn.Parameter(torch.zeros(components, dim))
        self.logits = nn.Parameter(torch.zeros(components))

    def params(self):
        return self.means, self.logvars, self.logits


def _nchw(x):
    # channels-last strides keep the CPU convolutions on the fast path
    return x.permute(0, 3, 1, 2).contiguous(memory_format=torch.channels_last)


def _nhwc(x):
    return x.permute(0, 2, 3, 1)


class NetGraph(nn.Module):
    def __init__(self, spec: BottleneckSpec):
        super().__init__()
        self.spec = spec
        k = spec.kernel_size
        h, w, c = spec.feature_shape
        self.encoder_body = _encoder_body(spec)
        if spec.kind == "dense":
            flat = h * w * c
            self.to_mu = nn.Linear(flat, spec.dense_dim)
            self.to_logvar = nn.Linear(flat, spec.dense_dim) if spec.variational else None
            self.from_code = nn.Linear(spec.dense_dim, flat)
        else:
            self.to_mu = nn.Conv2d(c, c, 1)
            self.to_logvar = nn.Conv2d(c, c, 1) if spec.variational else None
            self.from_code = None
        ch = spec.channels
        self.decoder_body = nn.Sequential(
            _up(ch[3], ch[3], k), _up(ch[3], ch[2], k), _up(ch[2], ch[1], k), _up(ch[1], ch[0], k)
        )
        self.to_image = nn.Conv2d(ch[0], 1, k, padding=k // 2)
        self.critic = ImageCritic(spec) if spec.critic else None
        self.latent_critic = LatentCritic(spec.dense_dim) if spec.latent_critic else None
        self.prior = (
            MixturePrior(spec.mixture_components, spec.code_dim)
            if spec.mixture_components
            else None
        )
        self.to(memory_format=torch.channels_last)

    # -- parameter groups
    def encoder_parameters(self):
        mods = [self.encoder_body, self.to_mu] + ([self.to_logvar] if self.to_logvar else [])
        return [p for m in mods for p in m.parameters()]

    def decoder_parameters(self):
        mods = [self.decoder_body, self.to_image] + ([self.from_code] if self.from_code else [])
        return [p for m in mods for p in m.parameters()]

    def autoencoder_parameters(self):
        params = self.encoder_parameters() + self.decoder_parameters()
        if self.prior is not None:
            params += list(self.prior.parameters())
        return params

    # -- forward pieces
    def _head(self, feats, layer):
        if self.spec.kind == "dense":
            return layer(feats.flatten(1))
        return _nhwc(layer(feats))

    def encode(self, x):
        """Return ``(mu, logvar)``; ``logvar`` is None for deterministic codes."""
        feats = self.encoder_body(_nchw(x))
        mu = self._head(feats, self.to_mu)
        if self.to_logvar is None:
            return mu, None
        logvar = self._head(feats, self.to_logvar).clamp(*LOGVAR_RANGE)
        return mu, logvar

    def decode(self, z):
        if self.spec.kind == "dense":
            h, w, c = self.spec.feature_shape
            feats = self.from_code(z).view(-1, c, h, w)
        else:
            feats = _nchw(z)
        return _nhwc(torch.sigmoid(self.to_image(self.decoder_body(feats))))

    def forward(self, x):
        """Deterministic reconstruction (posterior mean for variational codes)."""
        mu, _ = self.encode(x)
        return self.decode(mu)


def sigma_from_logvar(logvar):
    return torch.exp(0.5 * logvar)


_flush_depth = 0


def flush_denormals(fn):
    """Run ``fn`` with denormal floats flushed to zero, then restore the default.

    Denormal activations late in training slow CPU kernels several times
    over.  The flag is process-global FPU state, so it must not outlive the call.
    """
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        global _flush_depth
        _flush_depth += 1
        torch.set_flush_denormal(True)
        try:
            return fn(*args, **kwargs)
        finally:
            _flush_depth -= 1
            if _flush_depth == 0:
                torch.set_flush_denormal(False)
    return wrapper


def make_generator(seed) -> Optional[torch.Generator]:
    if seed is None:
        return None
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def reparameterize(mu, sigma, seed=None):
    """Draw ``mu + sigma * eps`` with standard normal ``eps``.

    ``seed`` may be an int, a ``torch.Generator`` (advanced in place), or
    None for the global generator.
    """
    if not bool(torch.all(sigma > 0)):
        raise NonPositiveSigma("sigma must be strictly positive")
    eps = torch.randn(mu.shape, generator=make_generator(seed), dtype=mu.dtype)
    return mu + sigma * eps


def latent_dropout(z, p, seed=None):
    """Inverted dropout with its own generator, active regardless of train mode."""
    if p <= 0:
        return z
    keep = torch.rand(z.shape, generator=make_generator(seed), dtype=z.dtype) >= p
    return z * keep / (1.0 - p)


def build_network(b: BottleneckSpec, seed: Optional[int] = None) -> NetGraph:
    if seed is None:
        return NetGraph(b)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return NetGraph(b)


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)


def save_checkpoint(graph: NetGraph, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "spec": asdict(graph.spec),
            "state_dict": graph.state_dict(),
            "extra": json.loads(json.dumps(extra or {})),
        },
        path,
    )
    return path


def load_checkpoint(path, expected_spec: Optional[BottleneckSpec] = None):
    """Rebuild a NetGraph from a checkpoint; returns ``(graph, extra)``."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a uadbench checkpoint")
    spec = BottleneckSpec(**blob["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointMismatch(f"checkpoint spec {spec} != expected {expected_spec}")
    graph = NetGraph(spec)
    graph.load_state_dict(blob["state_dict"])
    return graph, blob.get("extra", {})
