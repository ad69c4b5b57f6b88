"""Model zoo: method tags, training configuration and the training loops."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import losses as L
from .errors import InvalidConfig, NonFiniteLoss, PhaseOrderViolation
from .net import (
    BottleneckSpec,
    flush_denormals,
    NetGraph,
    build_network,
    load_checkpoint,
    make_generator,
    reparameterize,
    save_checkpoint,
    sigma_from_logvar,
)

log = logging.getLogger(__name__)


class MethodTag(str, Enum):
    AE_dense = "AE_dense"
    AE_spatial = "AE_spatial"
    ContextAE = "ContextAE"
    ConstrainedAE = "ConstrainedAE"
    VAE = "VAE"
    ContextVAE = "ContextVAE"
    ConstrainedAAE = "ConstrainedAAE"
    GMVAE_dense = "GMVAE_dense"
    GMVAE_spatial = "GMVAE_spatial"
    AnoVAEGAN = "AnoVAEGAN"
    fAnoGAN = "fAnoGAN"

    @property
    def spatial(self):
        return self in (MethodTag.AE_spatial, MethodTag.GMVAE_spatial)

    @property
    def variational(self):
        return self in (MethodTag.VAE, MethodTag.ContextVAE, MethodTag.GMVAE_dense,
                        MethodTag.GMVAE_spatial, MethodTag.AnoVAEGAN)

    @property
    def mixture(self):
        return self in (MethodTag.GMVAE_dense, MethodTag.GMVAE_spatial)

    @property
    def context(self):
        return self in (MethodTag.ContextAE, MethodTag.ContextVAE)

    @property
    def constrained(self):
        return self in (MethodTag.ConstrainedAE, MethodTag.ConstrainedAAE)

    @property
    def image_critic(self):
        return self in (MethodTag.AnoVAEGAN, MethodTag.fAnoGAN)

    def bottleneck(self, cfg: "TrainConfig", input_size=128, channels=(32, 64, 128, 128)):
        return BottleneckSpec(
            kind="spatial" if self.spatial else "dense",
            dense_dim=cfg.dense_dim,
            variational=self.variational,
            mixture_components=cfg.mixture_components if self.mixture else 0,
            input_size=input_size,
            channels=tuple(channels),
            critic=self.image_critic,
            latent_critic=self is MethodTag.ConstrainedAAE,
        )


SCORERS = ("reconstruction", "mc", "gradient", "restoration")


def admissible(tag, scorer: str) -> bool:
    """Which scorers make sense for which model.

    Gradient saliency and restoration both need a KL term, i.e. a variational
    bottleneck.
    """
    tag = MethodTag(tag)
    if scorer not in SCORERS:
        return False
    if scorer in ("gradient", "restoration"):
        return tag.variational
    return True


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lambda_kl: float = 1.0
    dropout_rate: float = 0.2
    batch_size: int = 64
    patience: int = 5
    eps_improve: float = 1e-9
    max_epochs: int = 100
    seed: int = 0
    dense_dim: int = 128
    lambda_constraint: float = 1.0
    lambda_adv: float = 1e-2
    lambda_gp: float = 10.0
    n_critic: int = 5
    kappa: float = 1.0
    mixture_components: int = 6
    kl_reduction: str = "sum"
    restore_best: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidConfig("batch_size, max_epochs and patience must be positive")
        if self.kl_reduction not in L.REDUCTIONS:
            raise InvalidConfig(f"kl_reduction must be one of {L.REDUCTIONS}")
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be >= 0")


@dataclass
class TrainedModel:
    graph: NetGraph
    tag: MethodTag
    train_config: TrainConfig
    history: list = field(default_factory=list)
    stopped_epoch: int = 0
    initial_val_loss: float = math.nan

    @property
    def final_val_loss(self):
        return min(h["val_loss"] for h in self.history) if self.history else math.nan

    def save(self, path):
        path = Path(path)
        save_checkpoint(
            self.graph,
            path,
            extra={
                "tag": self.tag.value,
                "train_config": asdict(self.train_config),
                "stopped_epoch": self.stopped_epoch,
                "initial_val_loss": self.initial_val_loss,
            },
        )
        write_history(self.history, path.with_suffix(".history.jsonl"))
        return path

    @classmethod
    def load(cls, path, expected_spec: Optional[BottleneckSpec] = None):
        path = Path(path)
        graph, extra = load_checkpoint(path, expected_spec)
        history_path = path.with_suffix(".history.jsonl")
        history = read_history(history_path) if history_path.exists() else []
        return cls(
            graph=graph,
            tag=MethodTag(extra["tag"]),
            train_config=TrainConfig(**extra["train_config"]),
            history=history,
            stopped_epoch=int(extra["stopped_epoch"]),
            initial_val_loss=float(extra["initial_val_loss"]),
        )


def write_history(history, path):
    path = Path(path)
    with path.open("w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_history(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# early stopping


class EarlyStopping:
    """Stop once ``patience`` epochs pass without beating the best by > eps."""

    def __init__(self, patience=5, eps=1e-9):
        self.patience = patience
        self.eps = eps
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, value) -> bool:
        self.epoch += 1
        improved = value < self.best - self.eps
        if improved:
            self.best = value
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved_last(self):
        return self.best_epoch == self.epoch


def replay_stop_epoch(val_losses, patience=5, eps=1e-9, max_epochs=None) -> int:
    """Stop epoch (1-based) that the early-stopping rule yields on a finished history."""
    n = len(val_losses) if max_epochs is None else min(len(val_losses), max_epochs)
    last_improvement, reference = 0, math.inf
    for epoch in range(1, n + 1):
        if val_losses[epoch - 1] < reference - eps:
            last_improvement, reference = epoch, val_losses[epoch - 1]
        if epoch - last_improvement >= patience:
            return epoch
    return n


def fit_loop(train_epoch: Callable[[int], dict], validate: Callable[[], float],
             max_epochs: int, patience: int, eps: float,
             snapshot: Optional[Callable[[], object]] = None,
             restore: Optional[Callable[[object], None]] = None):
    """Generic epoch loop with early stopping on ``validate()``.

    ``train_epoch(epoch)`` returns a dict with ``train_loss`` and optional
    components.  Returns ``(history, stopped_epoch)``.
    """
    stopper = EarlyStopping(patience, eps)
    history, best_state = [], None
    for epoch in range(1, max_epochs + 1):
        row = dict(train_epoch(epoch))
        val = float(validate())
        if not math.isfinite(val):
            raise NonFiniteLoss(f"validation loss is {val} at epoch {epoch}", epoch=epoch)
        components = {k: float(v) for k, v in row.items() if k != "train_loss"}
        log.debug("epoch %d train %.6f val %.6f", epoch, row.get("train_loss", math.nan), val)
        history.append({
            "epoch": epoch,
            "train_loss": float(row.get("train_loss", math.nan)),
            "val_loss": val,
            "components": components,
        })
        stop = stopper.update(val)
        if snapshot is not None and stopper.improved_last:
            best_state = snapshot()
        if stop:
            break
    if restore is not None and best_state is not None:
        restore(best_state)
    return history, len(history)


# ---------------------------------------------------------------------------
# training


def _tensor(batch):
    pixels = batch.pixels if hasattr(batch, "pixels") else batch
    return torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float32)


def _masks(batch):
    return getattr(batch, "masks", None)


@torch.no_grad()
def reconstruction_loss(graph: NetGraph, x: torch.Tensor, batch_size=256) -> float:
    """Mean l1 of the deterministic reconstruction over a stack of slices."""
    graph.eval()
    total = 0.0
    for i in range(0, x.shape[0], batch_size):
        xb = x[i:i + batch_size]
        total += float((graph(xb) - xb).abs().sum())
    return total / x.numel()


def _check_finite(loss, epoch, batch):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss became {float(loss.detach())} at epoch {epoch}, batch {batch}",
                            epoch=epoch, batch=batch)


def _prior_sample(graph, n, gen):
    return torch.randn((n,) + graph.spec.code_shape, generator=gen)


class _Trainer:
    def __init__(self, graph: NetGraph, tag: MethodTag, cfg: TrainConfig):
        self.graph, self.tag, self.cfg = graph, tag, cfg
        self.gen = make_generator(cfg.seed + 1)
        self.opt = torch.optim.Adam(graph.autoencoder_parameters(), lr=cfg.learning_rate)
        critic = graph.critic or graph.latent_critic
        self.critic_opt = (
            torch.optim.Adam(critic.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.9))
            if critic is not None else None
        )

    def _seed(self):
        return int(torch.randint(0, 2 ** 31 - 1, (1,), generator=self.gen))

    def _inputs(self, xb, mb):
        if self.tag.context:
            corrupted, _ = L.corrupt_pixels(xb.numpy(), mb, self._seed())
            return torch.as_tensor(corrupted)
        return xb

    def step(self, xb, mb, epoch, batch):
        g, cfg, tag = self.graph, self.cfg, self.tag
        g.train()
        xin = self._inputs(xb, mb)
        parts = {}
        mu, logvar = g.encode(xin)
        if tag.variational:
            z = reparameterize(mu, sigma_from_logvar(logvar), self.gen)
        else:
            z = mu
        x_hat = g.decode(z)
        rec = L.ae_loss(xb, x_hat)
        parts["rec"] = rec
        total = rec
        if tag.variational:
            if tag.mixture:
                kl, unif, _ = L.mixture_kl(mu, logvar, g.prior.params(), cfg.kl_reduction)
                parts["kl"], parts["uniformity"] = kl, unif
                total = total + cfg.lambda_kl * (kl + unif)
            else:
                kl = L.kl_to_standard_normal(mu, logvar, cfg.kl_reduction)
                parts["kl"] = kl
                total = total + cfg.lambda_kl * kl
        if tag.constrained:
            z_rec, _ = g.encode(x_hat)
            con = L.constrained_loss_term(mu, z_rec)
            parts["constraint"] = con
            total = total + cfg.lambda_constraint * con
        if tag is MethodTag.ConstrainedAAE:
            for _ in range(cfg.n_critic):
                prior = _prior_sample(g, mu.shape[0], self.gen)
                c_loss, _ = L.aae_adversarial_step(g.latent_critic, prior, mu.detach(),
                                                   cfg.lambda_gp, self.gen)
                self.critic_opt.zero_grad()
                c_loss.backward()
                self.critic_opt.step()
            parts["critic"] = c_loss.detach()
            reg = -g.latent_critic(mu).mean()
            parts["adversarial"] = reg
            total = total + cfg.lambda_adv * reg
        if tag is MethodTag.AnoVAEGAN:
            for _ in range(cfg.n_critic):
                c_loss, _ = L.wgan_losses(g.critic, xb, x_hat.detach(), cfg.lambda_gp, self.gen)
                self.critic_opt.zero_grad()
                c_loss.backward()
                self.critic_opt.step()
            parts["critic"] = c_loss.detach()
            adv = -g.critic(x_hat).mean()
            parts["adversarial"] = adv
            total = total + cfg.lambda_adv * adv
        _check_finite(total, epoch, batch)
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        parts["train_loss"] = total
        return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _mean_rows(rows):
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


@flush_denormals
def train(tag, train_data, val_data, cfg: TrainConfig = TrainConfig(),
          input_size: Optional[int] = None, channels=(32, 64, 128, 128)) -> TrainedModel:
    """Train one zoo model on healthy slices with early stopping.

    ``train_data``/``val_data`` are SliceBatches (or arrays shaped
    ``(n, H, W, 1)``).  Early stopping watches the validation l1
    reconstruction loss only.
    """
    tag = MethodTag(tag)
    if tag is MethodTag.fAnoGAN:
        return fanogan_train(train_data, val_data, cfg, input_size=input_size, channels=channels)
    x_train, x_val = _tensor(train_data), _tensor(val_data)
    if x_val.shape[0] == 0:
        raise InvalidConfig("validation set must not be empty")
    masks = _masks(train_data)
    size = input_size or x_train.shape[1]
    spec = tag.bottleneck(cfg, size, channels)
    torch.manual_seed(cfg.seed)
    graph = build_network(spec, seed=cfg.seed)
    trainer = _Trainer(graph, tag, cfg)
    initial = reconstruction_loss(graph, x_val)

    def train_epoch(epoch):
        rows = []
        for b, idx in enumerate(_batches(x_train.shape[0], cfg.batch_size, trainer.gen)):
            mb = masks[idx.numpy()] if masks is not None else None
            rows.append(trainer.step(x_train[idx], mb, epoch, b))
        return _mean_rows(rows)

    history, stopped = fit_loop(
        train_epoch,
        lambda: reconstruction_loss(graph, x_val),
        cfg.max_epochs, cfg.patience, cfg.eps_improve,
        snapshot=(lambda: copy.deepcopy(graph.state_dict())) if cfg.restore_best else None,
        restore=graph.load_state_dict,
    )
    graph.eval()
    return TrainedModel(graph, tag, cfg, history, stopped, initial)


# ---------------------------------------------------------------------------
# f-AnoGAN


class FAnoGANTrainer:
    """Two-phase f-AnoGAN training.

    Phase 1 fits the decoder (as generator) and the image critic with the
    Wasserstein loss on prior codes.  Phase 2 freezes both and fits the
    encoder so that ``Dec(Enc(x))`` matches ``x`` in image and critic-feature
    space.
    """

    def __init__(self, graph: NetGraph, cfg: TrainConfig):
        if graph.critic is None or graph.spec.variational:
            raise InvalidConfig("f-AnoGAN needs a deterministic graph with an image critic")
        self.graph, self.cfg = graph, cfg
        self.gen = make_generator(cfg.seed + 1)
        self.phase1_done = False
        self.history = []

    def izi_loss(self, x):
        g = self.graph
        x_hat = g.decode(g.encode(x)[0])
        feat_real = g.critic.features(x)
        feat_fake = g.critic.features(x_hat)
        return L.ae_loss(x, x_hat) + self.cfg.kappa * (feat_real - feat_fake).pow(2).mean()

    def train_generator(self, x_train, x_val):
        g, cfg = self.graph, self.cfg
        gen_params = g.decoder_parameters()
        g_opt = torch.optim.Adam(gen_params, lr=cfg.learning_rate, betas=(0.5, 0.9))
        c_opt = torch.optim.Adam(g.critic.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.9))
        z_val = _prior_sample(g, x_val.shape[0], make_generator(cfg.seed + 2))

        def train_epoch(epoch):
            g.train()
            rows = []
            for b, idx in enumerate(_batches(x_train.shape[0], cfg.batch_size, self.gen)):
                real = x_train[idx]
                for _ in range(cfg.n_critic):
                    fake = g.decode(_prior_sample(g, real.shape[0], self.gen)).detach()
                    c_loss, _ = L.wgan_losses(g.critic, real, fake, cfg.lambda_gp, self.gen)
                    c_opt.zero_grad()
                    c_loss.backward()
                    c_opt.step()
                fake = g.decode(_prior_sample(g, real.shape[0], self.gen))
                g_loss = -g.critic(fake).mean()
                _check_finite(g_loss, epoch, b)
                g_opt.zero_grad()
                g_loss.backward()
                g_opt.step()
                rows.append({"train_loss": float(g_loss.detach()), "critic": float(c_loss.detach())})
            return _mean_rows(rows)

        @torch.no_grad()
        def validate():
            # critic estimate of the Wasserstein distance on held-out data
            g.eval()
            return float(g.critic(x_val).mean() - g.critic(g.decode(z_val)).mean())

        history, stopped = fit_loop(train_epoch, validate, cfg.max_epochs, cfg.patience,
                                    cfg.eps_improve)
        self.history += [dict(h, phase=1) for h in history]
        self.phase1_done = True
        return stopped

    def train_encoder(self, x_train, x_val):
        if not self.phase1_done:
            raise PhaseOrderViolation("encoder training needs a trained generator and critic")
        g, cfg = self.graph, self.cfg
        frozen = g.decoder_parameters() + list(g.critic.parameters())
        for p in frozen:
            p.requires_grad_(False)
        opt = torch.optim.Adam(g.encoder_parameters(), lr=cfg.learning_rate)

        @torch.no_grad()
        def val_izi():
            g.eval()
            return float(self.izi_loss(x_val))

        self.initial_izi = val_izi()

        def train_epoch(epoch):
            g.train()
            rows = []
            for b, idx in enumerate(_batches(x_train.shape[0], cfg.batch_size, self.gen)):
                loss = self.izi_loss(x_train[idx])
                _check_finite(loss, epoch, b)
                opt.zero_grad()
                loss.backward()
                opt.step()
                rows.append({"train_loss": float(loss)})
            row = _mean_rows(rows)
            row["val_izi"] = val_izi()
            return row

        history, stopped = fit_loop(
            train_epoch,
            lambda: reconstruction_loss(g, x_val),
            cfg.max_epochs, cfg.patience, cfg.eps_improve,
            snapshot=(lambda: copy.deepcopy(g.state_dict())) if cfg.restore_best else None,
            restore=g.load_state_dict,
        )
        for p in frozen:
            p.requires_grad_(True)
        self.history += [dict(h, phase=2) for h in history]
        return stopped


@flush_denormals
def fanogan_train(train_data, val_data, cfg: TrainConfig = TrainConfig(),
                  input_size: Optional[int] = None, channels=(32, 64, 128, 128)) -> TrainedModel:
    x_train, x_val = _tensor(train_data), _tensor(val_data)
    if x_val.shape[0] == 0:
        raise InvalidConfig("validation set must not be empty")
    spec = MethodTag.fAnoGAN.bottleneck(cfg, input_size or x_train.shape[1], channels)
    torch.manual_seed(cfg.seed)
    graph = build_network(spec, seed=cfg.seed)
    trainer = FAnoGANTrainer(graph, cfg)
    trainer.train_generator(x_train, x_val)
    initial = reconstruction_loss(graph, x_val)
    stopped = trainer.train_encoder(x_train, x_val)
    graph.eval()
    model = TrainedModel(graph, MethodTag.fAnoGAN, cfg, trainer.history, stopped, initial)
    model.initial_izi = trainer.initial_izi
    return model
