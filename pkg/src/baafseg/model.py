"""Bilateral-augmentation encoder, multi-resolution upsampling, adaptive fusion and head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spatial
from . import tensor as T
from .config import ConfigError, ModelConfig
from .nn import Linear, Module, SharedMLP
from .tensor import Tensor


# ---------------------------------------------------------------------------- geometry


@dataclass
class Geometry:
    """Everything about the resolution pyramid that depends only on coordinates.

    ``positions[0]`` is the input cloud; for block m (1-based) ``neighbors[m-1]``
    indexes level m-1 points, ``samples[m-1]`` picks level m out of level m-1 and
    ``upsample[m-1]`` maps each level m-1 point to its nearest level m point.
    """

    positions: list[np.ndarray]
    neighbors: list[np.ndarray]
    samples: list[np.ndarray]
    upsample: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [len(p) for p in self.positions]


def build_geometry(positions, cfg: ModelConfig, rng: np.random.Generator | None = None) -> Geometry:
    pos = np.asarray(positions, dtype=np.float32)
    n = len(pos)
    if n < cfg.levels[0].ratio:
        raise spatial.SizeError(f"{n} points cannot be downsampled by {cfg.levels[0].ratio}")
    v = cfg.variant
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    levels, neighbors, samples, ups = [pos], [], [], []
    for m_size in cfg.level_sizes(n):
        cur = levels[-1]
        tree = spatial.KDTree(cur)
        neighbors.append(spatial.dilated_knn(cur, cur, cfg.k, v.knn_dilation, tree=tree))
        m_size = min(m_size, len(cur))
        if v.sampler == "fps":
            picked = spatial.fps(cur, m_size, start=0)
        else:
            picked = spatial.random_sample(cur, m_size, rng)
        samples.append(picked.indices)
        levels.append(cur[picked.indices])
        ups.append(spatial.nearest_index(levels[-1], cur))
    return Geometry(levels, neighbors, samples, ups)


# ---------------------------------------------------------------------------- block pieces


def _self_index(n: int, k: int) -> np.ndarray:
    return np.repeat(np.arange(n)[:, None], k, axis=1)


def local_context(values: Tensor, centroids: Tensor, neighbors: np.ndarray) -> Tensor:
    """[centroid; neighbor - centroid] for every (point, neighbor) pair: n x k x 2c."""
    if values.shape[1:] != centroids.shape[1:] or centroids.shape[0] != neighbors.shape[0]:
        raise T.DimensionError(f"local_context: {values.shape}, {centroids.shape}, {neighbors.shape}")
    center = T.take_rows(centroids, _self_index(*neighbors.shape))
    rel = T.neighbor_gather(values, neighbors) - center
    return T.concat([center, rel], axis=-1)


def augmentation_loss(shifted: Tensor, centroids: Tensor, mode: str = "sum") -> Tensor:
    """Sum (or mean) over points of || mean_j shifted_ij - centroid_i ||_2."""
    per_point = T.row_norm(T.neighbor_mean(shifted) - centroids)
    total = T.sum_all(per_point)
    return total if mode == "sum" else T.scale(total, 1.0 / per_point.shape[0])


augmentation_loss_geo = augmentation_loss
augmentation_loss_sem = augmentation_loss


@dataclass
class BlockOutput:
    features: Tensor  # S_m at the downsampled resolution
    aug_loss: Tensor
    context: Tensor  # G_i, n x k x d'
    shifted_p: Tensor
    shifted_f: Tensor


class BilateralContextBlock(Module):
    """One encoder stage: neighborhood context, bilateral offsets, mixed aggregation.

    ``d_in`` is the width of the incoming semantic features; the block emits
    ``out_dim`` channels, built from an augmented context of ``out_dim // 2``.
    """

    def __init__(self, d_in: int, out_dim: int, cfg: ModelConfig, rng: np.random.Generator):
        v = cfg.variant
        self.order = v.offset_order
        self.aggregation = v.aggregation
        self.losses = v.aug_loss
        self.loss_mode = cfg.loss_mode
        dp = out_dim // 2
        half = dp // 2
        d = d_in
        # offset heads start at zero so an untrained block shifts nothing
        if self.order == "p_then_f":
            self.offset_p = Linear(2 * d, 3, rng, zero=True)
            self.offset_f = Linear(9, d, rng, zero=True)
        elif self.order == "f_then_p":
            self.offset_f = Linear(6, d, rng, zero=True)
            self.offset_p = Linear(3 * d, 3, rng, zero=True)
        geo_w, sem_w = (6, 2 * d) if self.order == "none" else (9, 3 * d)
        self.project_p = SharedMLP(geo_w, half, rng)
        self.project_f = SharedMLP(sem_w, half, rng)
        if self.aggregation in ("mean", "mixed"):
            self.refine = Linear(dp, dp, rng)
            self.score = Linear(dp, dp, rng, bias=False)
        if self.aggregation != "mixed":
            self.lift = SharedMLP(dp, 2 * dp, rng)
        self.d_in = d_in
        self.out_dim = out_dim

    def augment(self, positions: Tensor, features: Tensor, neighbors: np.ndarray):
        """Shifted neighbors in both spaces and the augmented contexts (before projection)."""
        p_ctx = local_context(positions, positions, neighbors)
        f_ctx = local_context(features, features, neighbors)
        p_nb = T.neighbor_gather(positions, neighbors)
        f_nb = T.neighbor_gather(features, neighbors)
        if self.order == "none":
            return p_ctx, f_ctx, p_nb, f_nb
        if self.order == "p_then_f":
            shifted_p = self.offset_p(f_ctx) + p_nb
            geo = T.concat([p_ctx, shifted_p])
            shifted_f = self.offset_f(geo) + f_nb
            sem = T.concat([f_ctx, shifted_f])
        else:
            shifted_f = self.offset_f(p_ctx) + f_nb
            sem = T.concat([f_ctx, shifted_f])
            shifted_p = self.offset_p(sem) + p_nb
            geo = T.concat([p_ctx, shifted_p])
        return geo, sem, shifted_p, shifted_f

    def aggregate(self, context: Tensor, training: bool) -> Tensor:
        parts = []
        if self.aggregation in ("max", "mixed"):
            parts.append(T.neighbor_max(context))
        if self.aggregation in ("mean", "mixed"):
            parts.append(T.neighbor_weighted_mean(self.refine(context), self.score(context)))
        if self.aggregation == "mixed":
            return T.concat(parts)
        return self.lift(parts[0], training)

    def __call__(self, positions: Tensor, features: Tensor, neighbors: np.ndarray,
                 sample: np.ndarray, training: bool) -> BlockOutput:
        geo, sem, shifted_p, shifted_f = self.augment(positions, features, neighbors)
        context = T.concat([self.project_p(geo, training), self.project_f(sem, training)])
        s = self.aggregate(context, training)
        terms = []
        if "geometric" in self.losses:
            terms.append(augmentation_loss(shifted_p, positions, self.loss_mode))
        if "semantic" in self.losses:
            terms.append(augmentation_loss(shifted_f, features, self.loss_mode))
        loss = T.add_n(terms) if terms else Tensor(np.zeros(()))
        return BlockOutput(T.take_rows(s, sample), loss, context, shifted_p, shifted_f)


def bilateral_augment(block: BilateralContextBlock, positions: Tensor, features: Tensor,
                      neighbors: np.ndarray, training: bool = True):
    """Augmented local context G (n x k x d') plus the shifted neighbors in both spaces."""
    geo, sem, shifted_p, shifted_f = block.augment(positions, features, neighbors)
    context = T.concat([block.project_p(geo, training), block.project_f(sem, training)])
    return context, shifted_p, shifted_f


def mixed_local_aggregation(context: Tensor, block: BilateralContextBlock, training: bool = True) -> Tensor:
    return block.aggregate(context, training)


# ---------------------------------------------------------------------------- encoder


@dataclass
class ResolutionPyramid:
    geometry: Geometry
    features: list[Tensor]  # [F, S_1, ..., S_M]
    aug_losses: list[Tensor]
    shifted_p: list[Tensor] = field(default_factory=list)
    shifted_f: list[Tensor] = field(default_factory=list)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.extractor = SharedMLP(cfg.in_channels, cfg.extractor_dim, rng)
        widths = [cfg.extractor_dim] + [lv.out_dim for lv in cfg.levels]
        self.blocks = [BilateralContextBlock(widths[i], widths[i + 1], cfg, rng)
                       for i in range(len(cfg.levels))]

    def __call__(self, inputs: Tensor, geometry: Geometry, training: bool) -> ResolutionPyramid:
        if inputs.shape[0] == 0:
            raise T.EmptyInputError("empty cloud")
        feats = [self.extractor(inputs, training)]
        losses, sp, sf = [], [], []
        for m, block in enumerate(self.blocks):
            pos = Tensor(geometry.positions[m])
            out = block(pos, feats[-1], geometry.neighbors[m], geometry.samples[m], training)
            feats.append(out.features)
            losses.append(out.aug_loss)
            sp.append(out.shifted_p)
            sf.append(out.shifted_f)
        return ResolutionPyramid(geometry, feats, losses, sp, sf)


def feature_extractor(extractor: SharedMLP, inputs: Tensor, training: bool = True) -> Tensor:
    if inputs.shape[0] == 0:
        raise T.EmptyInputError("empty cloud")
    return extractor(inputs, training)


# ---------------------------------------------------------------------------- decoder / fusion


class UpsampleChain(Module):
    """Brings S_m back to full resolution, hop by hop, attaching same-resolution encoder features.

    Each hop: MLP, nearest-neighbor interpolation to the next finer level,
    concat with that level's encoder output, MLP. A one-unit layer then
    summarizes every full-resolution point into a scalar.
    """

    def __init__(self, level: int, widths: list[int], out_dim: int, rng: np.random.Generator):
        self.level = level
        self.pre, self.post = [], []
        if level == 0:
            self.single = SharedMLP(widths[0], out_dim, rng)
        cur = widths[level]
        for j in range(level, 0, -1):
            target = out_dim if j - 1 == 0 else widths[j - 1]
            self.pre.append(SharedMLP(cur, target, rng))
            self.post.append(SharedMLP(target + widths[j - 1], target, rng))
            cur = target
        self.summary = Linear(out_dim, 1, rng)

    def __call__(self, pyramid: ResolutionPyramid, training: bool) -> tuple[Tensor, Tensor]:
        x = pyramid.features[self.level]
        if self.level == 0:
            x = self.single(x, training)
        for hop, j in enumerate(range(self.level, 0, -1)):
            x = self.pre[hop](x, training)
            x = T.take_rows(x, pyramid.geometry.upsample[j - 1])
            x = T.concat([x, pyramid.features[j - 1]])
            x = self.post[hop](x, training)
        return x, self.summary(x)


def upsample_map(chain: UpsampleChain, pyramid: ResolutionPyramid, training: bool = True):
    return chain(pyramid, training)


def adaptive_fusion(maps: list[Tensor], summaries: list[Tensor] | None, fusion: str = "pointwise_adaptive",
                    squeeze: Linear | None = None) -> tuple[Tensor, Tensor | None]:
    """Combine full-resolution maps; returns (S_out, fusion weights or None)."""
    shape = maps[0].shape
    for mp in maps:
        if mp.shape != shape:
            raise T.DimensionError(f"fusion maps differ in shape: {[m.shape for m in maps]}")
    if fusion == "last_only":
        return maps[-1], None
    if fusion == "sum":
        return T.add_n(maps), None
    if fusion == "product":
        return T.mul_n(maps), None
    if fusion == "concat":
        return T.concat(maps, axis=1), None
    if fusion == "pointwise_adaptive":
        weights = T.softmax(T.concat(summaries, axis=1), axis=1)
        return T.weighted_maps(maps, weights), weights
    if fusion == "scalar_weights":
        squeezed = [squeeze(T.mean_rows(mp)) for mp in maps]  # each 1 x 1
        psi = T.softmax(T.concat(squeezed, axis=1), axis=1)
        weights = T.take_rows(psi, np.zeros(shape[0], dtype=np.int64))
        return T.weighted_maps(maps, weights), weights
    raise ConfigError(f"unknown fusion {fusion!r}")


class PredictionHead(Module):
    def __init__(self, c_in: int, dims: tuple, num_classes: int, dropout: float, rng: np.random.Generator):
        self.layers = []
        for width in dims:
            self.layers.append(SharedMLP(c_in, width, rng))
            c_in = width
        self.out = Linear(c_in, num_classes, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, training)
        x = T.dropout(x, self.dropout, training, rng)
        return self.out(x)


def predict_head(head: PredictionHead, features: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    return head(features, training, rng)


# ---------------------------------------------------------------------------- network


@dataclass
class ForwardResult:
    logits: Tensor
    aug_losses: list[Tensor]
    pyramid: ResolutionPyramid
    fusion_weights: Tensor | None
    maps: list[Tensor]


class BAAFNet(Module):
    """Full segmentation network; every ablation variant is selected through ``cfg.variant``."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        widths = [cfg.extractor_dim] + [lv.out_dim for lv in cfg.levels]
        m = len(cfg.levels)
        fusion = cfg.variant.fusion
        levels = [m] if fusion == "last_only" else list(range(1, m + 1))
        self.chains = [UpsampleChain(lv, widths, cfg.decoder_dim, rng) for lv in levels]
        self.squeeze = Linear(cfg.decoder_dim, 1, rng) if fusion == "scalar_weights" else None
        head_in = cfg.decoder_dim * (m if fusion == "concat" else 1)
        self.head = PredictionHead(head_in, cfg.head_dims, cfg.num_classes, cfg.dropout, rng)
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)

    def inputs(self, positions, colors=None) -> Tensor:
        pos = np.asarray(positions, dtype=np.float32)
        if self.cfg.in_channels == 3:
            return Tensor(pos)
        if colors is None:
            raise ConfigError(f"model expects {self.cfg.in_channels} input channels but the cloud has no colors")
        feats = np.concatenate([pos, np.asarray(colors, dtype=np.float32)], axis=1)
        if feats.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"input has {feats.shape[1]} channels, model expects {self.cfg.in_channels}")
        return Tensor(feats)

    def forward(self, positions, colors=None, training: bool = False,
                geometry: Geometry | None = None) -> ForwardResult:
        if geometry is None:
            geometry = build_geometry(positions, self.cfg)
        pyramid = self.encoder(self.inputs(positions, colors), geometry, training)
        maps, summaries = [], []
        for chain in self.chains:
            s, phi = chain(pyramid, training)
            maps.append(s)
            summaries.append(phi)
        fused, weights = adaptive_fusion(maps, summaries, self.cfg.variant.fusion, self.squeeze)
        logits = self.head(fused, training, self.dropout_rng)
        return ForwardResult(logits, pyramid.aug_losses, pyramid, weights, maps)

    __call__ = forward

    def predict(self, positions, colors=None, geometry: Geometry | None = None) -> np.ndarray:
        with T.no_grad():
            out = self.forward(positions, colors, training=False, geometry=geometry)
        return out.logits.data.argmax(axis=1)
