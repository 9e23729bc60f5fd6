"""Adam optimizer and the mini-batch training loop.

The update is the standard bias-corrected Adam.  The configured 2% decay
is applied to the learning rate per epoch by default
(lr_effective = lr * (1 - decay)^epoch); setting ``decay_mode='l2'``
instead keeps the learning rate constant and adds the decay as an L2
penalty gradient on every parameter.

Batches are drawn per identity: P individuals x K images each, so every
batch is guaranteed to contain positives for mining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import mining, model
from .losses import LossConfig, contrastive_grad, contrastive_loss, triplet_grad, triplet_loss
from .rng import RngStream

LOSS_KINDS = ("siamese", "triplet")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_per_epoch: float = 0.02
    decay_mode: str = "lr"  # 'lr': lr decay per epoch, 'l2': weight decay
    epochs: int = 100
    batch_size: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not 0 <= self.decay_per_epoch < 1:
            raise ValueError(f"decay_per_epoch must be in [0, 1), got {self.decay_per_epoch}")
        if self.decay_mode not in ("lr", "l2"):
            raise ValueError(f"decay_mode must be 'lr' or 'l2', got {self.decay_mode!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")


@dataclass
class AdamState:
    m: model.ParamGrads
    v: model.ParamGrads
    t: int = 0

    @classmethod
    def zeros_for(cls, net: model.EmbeddingNet) -> "AdamState":
        return cls(model.ParamGrads.zeros_for(net), model.ParamGrads.zeros_for(net))


def effective_lr(cfg: OptimConfig, epoch: int) -> float:
    if cfg.decay_mode == "l2":
        return cfg.lr
    return cfg.lr * (1.0 - cfg.decay_per_epoch) ** epoch


def adam_step(
    net: model.EmbeddingNet,
    grads: model.ParamGrads,
    state: AdamState,
    cfg: OptimConfig,
    epoch: int,
) -> None:
    """One bias-corrected Adam update, in place on net and state."""
    for name, g in grads.named():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
    state.t += 1
    lr = effective_lr(cfg, epoch)
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    params = list(net.weights) + list(net.biases)
    ms = list(state.m.weights) + list(state.m.biases)
    vs = list(state.v.weights) + list(state.v.biases)
    gs = list(grads.weights) + list(grads.biases)
    for p, m, v, g in zip(params, ms, vs, gs):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if cfg.decay_mode == "l2":
            g = g + cfg.decay_per_epoch * p
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class SamplerConfig:
    """P individuals x K images per mini-batch."""

    individuals_per_batch: int = 8
    images_per_individual: int = 4

    def __post_init__(self):
        if self.individuals_per_batch < 2 or self.images_per_individual < 1:
            raise ValueError("need >= 2 individuals and >= 1 image per batch slot")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float | None


def loss_log_to_csv(log: list[EpochLog]) -> str:
    lines = ["epoch,mean_train_loss,mean_val_loss"]
    for entry in log:
        val = "" if entry.val_loss is None else repr(entry.val_loss)
        lines.append(f"{entry.epoch},{repr(entry.train_loss)},{val}")
    return "\n".join(lines) + "\n"


def _pk_batches(
    groups: dict[str, list[int]],
    n_samples: int,
    sampler: SamplerConfig,
    rng: RngStream,
) -> list[list[int]]:
    """Index batches of P individuals x K images covering ~one epoch."""
    eligible = [ind for ind, idxs in groups.items() if len(idxs) >= 2]
    if not eligible:
        raise mining.MiningError("no positive pairs available: every individual is a singleton")
    p = min(sampler.individuals_per_batch, len(eligible))
    k = sampler.images_per_individual
    n_batches = max(1, -(-n_samples // (p * k)))
    batches = []
    for _ in range(n_batches):
        batch: list[int] = []
        for ind in rng.sample(eligible, p):
            idxs = groups[ind]
            if len(idxs) >= k:
                batch.extend(rng.sample(idxs, k))
            else:
                # Too few images: take them all, then resample to fill K.
                batch.extend(idxs)
                batch.extend(rng.choice(idxs) for _ in range(k - len(idxs)))
        batches.append(batch)
    return batches


def _batch_loss_and_grads(
    net: model.EmbeddingNet,
    feats: list[np.ndarray],
    labels: list[str],
    loss_kind: str,
    loss_cfg: LossConfig,
    rng: RngStream,
) -> tuple[float, model.ParamGrads]:
    embeddings = []
    traces = []
    for x in feats:
        e, tr = model.forward(net, x)
        embeddings.append(e)
        traces.append(tr)
    batch = mining.LabeledBatch(np.array(embeddings), labels)

    # Mean loss over mined units; embedding gradients accumulate per sample
    # and flow through each sample's trace exactly once.
    embed_grads = [np.zeros(net.embedding_dim) for _ in feats]
    total = 0.0
    if loss_kind == "siamese":
        units = mining.sample_pairs(batch, rng)
        for i, j, same in units:
            total += contrastive_loss(embeddings[i], embeddings[j], same, loss_cfg)
            g1, g2 = contrastive_grad(embeddings[i], embeddings[j], same, loss_cfg)
            embed_grads[i] += g1
            embed_grads[j] += g2
    else:
        units = mining.mine_semi_hard_triplets(batch, loss_cfg, rng)
        for t in units:
            a, p, n = t.anchor, t.positive, t.negative
            total += triplet_loss(embeddings[a], embeddings[p], embeddings[n], loss_cfg)
            ga, gp, gn = triplet_grad(
                embeddings[a], embeddings[p], embeddings[n], loss_cfg
            )
            embed_grads[a] += ga
            embed_grads[p] += gp
            embed_grads[n] += gn

    scale = 1.0 / len(units)
    grads = model.ParamGrads.zeros_for(net)
    for trace, g in zip(traces, embed_grads):
        if np.any(g):
            grads.add_(model.backward(net, trace, g * scale))
    return total * scale, grads


def _mean_loss(
    net: model.EmbeddingNet,
    feats: np.ndarray,
    labels: list[str],
    loss_kind: str,
    loss_cfg: LossConfig,
    rng: RngStream,
) -> float:
    embeddings = model.forward_many(net, feats)
    batch = mining.LabeledBatch(embeddings, labels)
    total = 0.0
    if loss_kind == "siamese":
        units = mining.sample_pairs(batch, rng)
        for i, j, same in units:
            total += contrastive_loss(embeddings[i], embeddings[j], same, loss_cfg)
    else:
        units = mining.mine_semi_hard_triplets(batch, loss_cfg, rng)
        for t in units:
            total += triplet_loss(
                embeddings[t.anchor], embeddings[t.positive], embeddings[t.negative], loss_cfg
            )
    return total / len(units)


def train(
    net: model.EmbeddingNet,
    dataset: data_mod.Manifest,
    loss_kind: str,
    cfg: OptimConfig,
    rng: RngStream,
    *,
    loss_cfg: LossConfig | None = None,
    sampler: SamplerConfig | None = None,
    val_dataset: data_mod.Manifest | None = None,
    augment_cfg: data_mod.AugmentConfig | None = None,
    image_root=None,
    early_stop_patience: int | None = None,
) -> list[EpochLog]:
    """Train in place; returns the per-epoch loss log.

    Deterministic in the rng seed: every epoch, batch, augmentation and
    mining decision uses a stream derived from it.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    loss_cfg = loss_cfg or LossConfig()
    sampler = sampler or SamplerConfig()
    if sampler.individuals_per_batch * sampler.images_per_individual != cfg.batch_size:
        raise ValueError(
            f"batch_size {cfg.batch_size} != "
            f"{sampler.individuals_per_batch} individuals x {sampler.images_per_individual} images"
        )
    groups = dataset.by_individual()
    samples = dataset.samples

    def features_of(idx: int, aug_rng: RngStream | None) -> np.ndarray:
        s = samples[idx]
        if s.is_inline or augment_cfg is None or aug_rng is None:
            return data_mod.sample_features(s, image_root)
        raster = data_mod.read_pnm(
            s.ref if image_root is None else f"{image_root}/{s.ref}"
        )
        return data_mod.raster_to_features(
            data_mod.augment(raster, augment_cfg, aug_rng)
        )

    val_feats = None
    val_labels = None
    if val_dataset is not None and len(val_dataset) >= 2:
        val_feats = np.array(
            [data_mod.sample_features(s, image_root) for s in val_dataset.samples]
        )
        val_labels = [s.individual_id for s in val_dataset.samples]

    state = AdamState.zeros_for(net)
    log: list[EpochLog] = []
    best_val = np.inf
    since_best = 0
    for epoch in range(cfg.epochs):
        epoch_rng = rng.derive(epoch)
        batches = _pk_batches(groups, len(samples), sampler, epoch_rng.derive(0))
        batch_losses = []
        for b, idxs in enumerate(batches):
            brng = epoch_rng.derive(1 + b)
            aug_rng = brng.derive(0)
            feats = [features_of(i, aug_rng) for i in idxs]
            labels = [samples[i].individual_id for i in idxs]
            loss, grads = _batch_loss_and_grads(
                net, feats, labels, loss_kind, loss_cfg, brng.derive(1)
            )
            adam_step(net, grads, state, cfg, epoch)
            batch_losses.append(loss)

        val_loss = None
        if val_feats is not None:
            try:
                val_loss = _mean_loss(
                    net, val_feats, val_labels, loss_kind, loss_cfg,
                    epoch_rng.derive(999_983),
                )
            except mining.MiningError:
                val_loss = None
        log.append(EpochLog(epoch, float(np.mean(batch_losses)), val_loss))

        if early_stop_patience is not None and val_loss is not None:
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                since_best = 0
            else:
                since_best += 1
                if since_best > early_stop_patience:
                    break
    return log
