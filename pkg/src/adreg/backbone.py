"""Hierarchical detector-descriptor backbone.

Each layer samples representative points (FPS at the first layer, weighted
FPS above, weights = 1 - uncertainty), groups the layer input around them by
KNN, scores group members with a CBR stack (softmax weights), and emits the
weighted fusion of member coordinates and descriptor features plus a sigmoid
uncertainty per output point. The layer-2 output feeds the fine registration
stage, layer 3 the coarse stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .geometry import as_points, farthest_point_sample, knn_search
from .nnet import softmax_rows, softmax_rows_backward

# Uncertainty channel fed to the first layer, which has no estimate yet.
INITIAL_UNCERTAINTY = 0.5
LIFT_WIDTH = 32
UNCERTAINTY_HIDDEN = 64


@dataclass(frozen=True)
class LayerConfig:
    n_out: int
    k_group: int
    widths: tuple[int, ...]


# Reference configuration; n_out scales with the run factor, K and channel
# widths stay fixed (K additionally clamps to the available input size).
FULL_SCALE_LAYERS = (
    LayerConfig(1024, 64, (32, 32, 64)),
    LayerConfig(512, 32, (64, 64, 128)),
    LayerConfig(256, 16, (128, 128, 256)),
)


def scaled_layer_configs(scale: float = 1.0) -> tuple[LayerConfig, ...]:
    if scale <= 0:
        raise ValueError("backbone scale must be positive")
    return tuple(
        LayerConfig(max(1, round(cfg.n_out * scale)), cfg.k_group, cfg.widths)
        for cfg in FULL_SCALE_LAYERS)


@dataclass
class FeatureSet:
    """Superpoints with their descriptors and uncertainties."""

    points: np.ndarray         # (N, 3)
    descriptors: np.ndarray    # (N, C)
    uncertainties: np.ndarray  # (N,)

    def __post_init__(self):
        n = len(self.points)
        if len(self.descriptors) != n or len(self.uncertainties) != n:
            raise ValueError("feature set fields must share their row count")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class LayerPlan:
    selected: np.ndarray  # (N_out,) indices into the layer input
    groups: np.ndarray    # (N_out, K_eff) indices into the layer input


class DetectorDescriptorLayer:
    """One downsampling stage: detector weights, descriptor fusion, uncertainty."""

    def __init__(self, in_feat_dim: int, cfg: LayerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.in_feat_dim = in_feat_dim
        group_dim = 3 + in_feat_dim + 1
        self.detector = nnet.CBRStack(group_dim, cfg.widths, 1, rng)
        self.descriptor = nnet.CBRStack(group_dim, cfg.widths, None, rng)
        self.uncertainty = nnet.MLP(cfg.widths[-1], UNCERTAINTY_HIDDEN, 1, rng,
                                    sigmoid_out=True)

    @property
    def out_dim(self) -> int:
        return self.cfg.widths[-1]

    def plan(self, pts: np.ndarray, unc: np.ndarray, seed: int,
             weighted: bool) -> LayerPlan:
        n_in = len(pts)
        if n_in < self.cfg.n_out:
            raise ValueError(
                f"layer needs at least {self.cfg.n_out} input points, got {n_in}")
        weights = (1.0 - unc) if weighted else None
        selected = farthest_point_sample(pts, self.cfg.n_out, weights=weights, seed=seed)
        k_eff = min(self.cfg.k_group, n_in)
        groups = knn_search(pts[selected], pts, k_eff).indices
        return LayerPlan(selected, groups)

    def forward(self, pts: np.ndarray, feats: np.ndarray, unc: np.ndarray,
                plan: LayerPlan, train: bool):
        if feats.shape[1] != self.in_feat_dim:
            raise ValueError(f"expected feature width {self.in_feat_dim}, got {feats.shape[1]}")
        n_out, k = plan.groups.shape
        centers = pts[plan.selected]
        member_pts = pts[plan.groups]
        rel = member_pts - centers[:, None, :]
        member_feats = feats[plan.groups]
        member_unc = unc[plan.groups]

        x = np.concatenate(
            [rel.reshape(n_out * k, 3),
             member_feats.reshape(n_out * k, -1),
             member_unc.reshape(n_out * k, 1)], axis=1)
        logits, det_cache = self.detector.forward(x, train)
        w = softmax_rows(logits.reshape(n_out, k))
        p_out = (w[..., None] * member_pts).sum(axis=1)
        desc_rows, desc_cache = self.descriptor.forward(x, train)
        desc_feat = desc_rows.reshape(n_out, k, self.out_dim)
        d_out = (w[..., None] * desc_feat).sum(axis=1)
        u_rows, unc_cache = self.uncertainty.forward(d_out)
        u_out = u_rows.reshape(n_out)

        cache = {"plan": plan, "n_in": len(pts), "w": w, "member_pts": member_pts,
                 "desc_feat": desc_feat, "det": det_cache, "desc": desc_cache,
                 "unc": unc_cache}
        return p_out, d_out, u_out, cache

    def backward(self, cache, g_pts_out, g_desc_out, g_unc_out):
        plan, w = cache["plan"], cache["w"]
        member_pts, desc_feat = cache["member_pts"], cache["desc_feat"]
        n_out, k = plan.groups.shape

        g_desc_out = g_desc_out + self.uncertainty.backward(
            cache["unc"], g_unc_out.reshape(n_out, 1))

        g_w = (desc_feat * g_desc_out[:, None, :]).sum(axis=-1)
        g_desc_feat = w[..., None] * g_desc_out[:, None, :]
        g_w += (member_pts * g_pts_out[:, None, :]).sum(axis=-1)
        g_member_pts = w[..., None] * g_pts_out[:, None, :]

        g_logits = softmax_rows_backward(g_w, w)
        g_x = self.detector.backward(cache["det"], g_logits.reshape(n_out * k, 1))
        g_x = g_x + self.descriptor.backward(
            cache["desc"], g_desc_feat.reshape(n_out * k, self.out_dim))

        g_rel = g_x[:, :3].reshape(n_out, k, 3)
        g_member_feats = g_x[:, 3:3 + self.in_feat_dim]
        g_member_unc = g_x[:, 3 + self.in_feat_dim]

        g_member_pts = g_member_pts + g_rel
        g_pts_in = np.zeros((cache["n_in"], 3))
        np.add.at(g_pts_in, plan.groups.reshape(-1), g_member_pts.reshape(-1, 3))
        np.add.at(g_pts_in, plan.selected, -g_rel.sum(axis=1))
        g_feats_in = np.zeros((cache["n_in"], self.in_feat_dim))
        np.add.at(g_feats_in, plan.groups.reshape(-1), g_member_feats)
        g_unc_in = np.zeros(cache["n_in"])
        np.add.at(g_unc_in, plan.groups.reshape(-1), g_member_unc)
        return g_pts_in, g_feats_in, g_unc_in

    def named_params(self, prefix: str):
        yield from self.detector.named_params(f"{prefix}.det")
        yield from self.descriptor.named_params(f"{prefix}.desc")
        yield from self.uncertainty.named_params(f"{prefix}.unc")

    def named_buffers(self, prefix: str):
        yield from self.detector.named_buffers(f"{prefix}.det")
        yield from self.descriptor.named_buffers(f"{prefix}.desc")


@dataclass
class BackboneOutput:
    fine: FeatureSet
    coarse: FeatureSet
    plans: tuple[LayerPlan, ...]
    cache: dict | None


class Backbone:
    """Three detector-descriptor layers; layer 2 is the fine stage, layer 3
    the coarse stage."""

    def __init__(self, rng: np.random.Generator, scale: float = 1.0):
        self.configs = scaled_layer_configs(scale)
        self.lift = nnet.Linear(3, LIFT_WIDTH, rng)
        in_dims = (LIFT_WIDTH,) + tuple(c.widths[-1] for c in self.configs[:-1])
        self.layers = [DetectorDescriptorLayer(d, c, rng)
                       for d, c in zip(in_dims, self.configs)]

    def forward(self, cloud, seed: int = 0, train: bool = False,
                plans: tuple[LayerPlan, ...] | None = None,
                want_cache: bool = False) -> BackboneOutput:
        pts = as_points(cloud)
        if len(pts) < self.configs[0].n_out:
            raise ValueError(
                f"backbone needs at least {self.configs[0].n_out} points, got {len(pts)}")
        feats, lift_cache = self.lift.forward(pts)
        unc = np.full(len(pts), INITIAL_UNCERTAINTY)

        outputs = []
        used_plans = []
        caches = []
        for i, layer in enumerate(self.layers):
            if plans is not None:
                plan = plans[i]
            else:
                plan = layer.plan(pts, unc, seed=seed, weighted=(i > 0))
            p_out, d_out, u_out, cache = layer.forward(pts, feats, unc, plan, train)
            outputs.append(FeatureSet(p_out, d_out, u_out))
            used_plans.append(plan)
            caches.append(cache)
            pts, feats, unc = p_out, d_out, u_out

        cache = {"layers": caches, "lift": lift_cache} if want_cache else None
        return BackboneOutput(fine=outputs[1], coarse=outputs[2],
                              plans=tuple(used_plans), cache=cache)

    def backward(self, output: BackboneOutput, g_coarse=None, g_fine=None):
        """Accumulate parameter gradients given output-side gradients.

        ``g_coarse``/``g_fine`` are (g_points, g_descriptors, g_uncertainties)
        triples; missing entries count as zero.
        """
        caches = output.cache["layers"]

        def unpack(g, fs):
            if g is None:
                return (np.zeros_like(fs.points), np.zeros_like(fs.descriptors),
                        np.zeros_like(fs.uncertainties))
            gp, gd, gu = g
            return (np.zeros_like(fs.points) if gp is None else gp,
                    np.zeros_like(fs.descriptors) if gd is None else gd,
                    np.zeros_like(fs.uncertainties) if gu is None else gu)

        gp, gd, gu = unpack(g_coarse, output.coarse)
        fp, fd, fu = unpack(g_fine, output.fine)
        gp2, gd2, gu2 = self.layers[2].backward(caches[2], gp, gd, gu)
        gp1, gd1, gu1 = self.layers[1].backward(
            caches[1], gp2 + fp, gd2 + fd, gu2 + fu)
        g_pts0, g_feats0, _ = self.layers[0].backward(caches[0], gp1, gd1, gu1)
        g_pts0 = g_pts0 + self.lift.backward(output.cache["lift"], g_feats0)
        return g_pts0

    def named_params(self, prefix: str = "backbone"):
        yield from self.lift.named_params(f"{prefix}.lift")
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i + 1}")

    def named_buffers(self, prefix: str = "backbone"):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"{prefix}.layer{i + 1}")
