"""Coarse registration over purified superpoints.

Candidates are retrieved per source superpoint by KNN in descriptor space;
geometric and descriptor feature tensors feed a CBR predictor whose softmax
weights fuse candidate coordinates and descriptors into pseudo-targets. An
MLP scores per-point confidence and a weighted SVD solves for the rigid
transform. Forward/backward pairs expose exact gradients end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bgmm, nnet
from .backbone import Backbone, BackboneOutput, FeatureSet
from .geometry import NeighborSet, RigidTransform, knn_search, skew

WEIGHT_FLOOR = 1e-12
NORM_EPS = 1e-12
PREDICTOR_WIDTHS = (64, 64, 32)
CONFIDENCE_HIDDEN = 64


class DegeneracyError(RuntimeError):
    """Geometry too degenerate to determine a rigid transform."""


@dataclass
class CandidateFeatures:
    geometric: np.ndarray   # (N, K, 10)
    descriptor: np.ndarray  # (N, K, 2C + 3)


@dataclass
class WeightedCorrespondences:
    fused_points: np.ndarray       # (N, 3)
    fused_descriptors: np.ndarray  # (N, C)
    candidate_weights: np.ndarray  # (N, K), rows sum to 1
    confidences: np.ndarray        # (N,)


class CandidatePredictor:
    """Per-candidate CBR scorer (widths 64/64/32, scalar head)."""

    def __init__(self, descriptor_dim: int, rng: np.random.Generator):
        self.in_dim = 10 + 2 * descriptor_dim + 3
        self.stack = nnet.CBRStack(self.in_dim, PREDICTOR_WIDTHS, 1, rng)

    def forward(self, rows: np.ndarray, train: bool):
        return self.stack.forward(rows, train)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        return self.stack.backward(cache, grad_out)

    def named_params(self, prefix: str):
        yield from self.stack.named_params(prefix)

    def named_buffers(self, prefix: str):
        yield from self.stack.named_buffers(prefix)


class ConfidenceHead:
    """Two-layer MLP with a sigmoid scalar output per point."""

    def __init__(self, descriptor_dim: int, rng: np.random.Generator):
        self.mlp = nnet.MLP(descriptor_dim, CONFIDENCE_HIDDEN, 1, rng, sigmoid_out=True)

    def forward(self, fused_desc: np.ndarray):
        out, cache = self.mlp.forward(fused_desc)
        return out.reshape(-1), cache

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        return self.mlp.backward(cache, grad_out.reshape(-1, 1))

    def named_params(self, prefix: str):
        yield from self.mlp.named_params(prefix)

    def named_buffers(self, prefix: str):
        return iter(())


# ---------------------------------------------------------------------------
# Candidate feature assembly


def _safe_norms(vecs: np.ndarray) -> np.ndarray:
    return np.maximum(np.linalg.norm(vecs, axis=-1), NORM_EPS)


def assemble_candidate_features(src: FeatureSet, tgt: FeatureSet,
                                cand_idx: np.ndarray, with_similarity: bool = True):
    """Build geometric and descriptor feature tensors for given candidates.

    Returns (CandidateFeatures, cache). The descriptor block carries the
    cosine-similarity channel only for the coarse stage.
    """
    if src.descriptors.shape[1] != tgt.descriptors.shape[1]:
        raise ValueError("source and target descriptor widths differ")
    n, k = cand_idx.shape
    cand_pts = tgt.points[cand_idx]               # (N, K, 3)
    cand_desc = tgt.descriptors[cand_idx]         # (N, K, C)
    cand_unc = tgt.uncertainties[cand_idx]        # (N, K)
    diff = src.points[:, None, :] - cand_pts
    norms = np.linalg.norm(diff, axis=-1)
    geometric = np.concatenate(
        [np.broadcast_to(src.points[:, None, :], cand_pts.shape),
         cand_pts, diff, norms[..., None]], axis=-1)

    c = src.descriptors.shape[1]
    parts = [np.broadcast_to(src.descriptors[:, None, :], cand_desc.shape),
             cand_desc,
             np.broadcast_to(src.uncertainties[:, None, None], (n, k, 1)),
             cand_unc[..., None]]
    cache = {"cand_idx": cand_idx, "diff": diff, "norms": norms, "c": c,
             "with_similarity": with_similarity, "n_tgt": len(tgt),
             "src_desc": src.descriptors, "cand_desc": cand_desc}
    if with_similarity:
        src_norm = _safe_norms(src.descriptors)           # (N,)
        cand_norm = _safe_norms(cand_desc)                # (N, K)
        dots = (src.descriptors[:, None, :] * cand_desc).sum(-1)
        sim = dots / (src_norm[:, None] * cand_norm)
        parts.append(sim[..., None])
        cache.update({"src_norm": src_norm, "cand_norm": cand_norm, "sim": sim})
    descriptor = np.concatenate(parts, axis=-1)
    return CandidateFeatures(geometric, descriptor), cache


def assemble_candidate_features_backward(cache, g_geometric, g_descriptor):
    """Gradients of the feature tensors w.r.t. both feature sets.

    Returns (g_src_pts, g_src_desc, g_src_unc, g_tgt_pts, g_tgt_desc,
    g_tgt_unc); target-side gradients scatter through the candidate indices.
    """
    cand_idx = cache["cand_idx"]
    diff, norms, c = cache["diff"], cache["norms"], cache["c"]
    n, k = cand_idx.shape

    g_src_pts = g_geometric[..., 0:3].sum(axis=1)
    g_cand_pts = g_geometric[..., 3:6].copy()
    g_diff = g_geometric[..., 6:9].copy()
    g_diff += g_geometric[..., 9:10] * diff / np.maximum(norms, NORM_EPS)[..., None]
    g_src_pts += g_diff.sum(axis=1)
    g_cand_pts -= g_diff

    g_src_desc = g_descriptor[..., 0:c].sum(axis=1)
    g_cand_desc = g_descriptor[..., c:2 * c].copy()
    g_src_unc = g_descriptor[..., 2 * c].sum(axis=1)
    g_cand_unc = g_descriptor[..., 2 * c + 1].copy()

    if cache["with_similarity"]:
        g_sim = g_descriptor[..., 2 * c + 2]
        src_desc, cand_desc = cache["src_desc"], cache["cand_desc"]
        src_norm, cand_norm, sim = cache["src_norm"], cache["cand_norm"], cache["sim"]
        denom = src_norm[:, None] * cand_norm
        g_src_desc += ((g_sim / denom)[..., None] * cand_desc).sum(axis=1)
        g_src_desc -= ((g_sim * sim).sum(axis=1) / src_norm ** 2)[:, None] * src_desc
        g_cand_desc += (g_sim / denom)[..., None] * np.broadcast_to(
            src_desc[:, None, :], cand_desc.shape)
        g_cand_desc -= ((g_sim * sim) / cand_norm ** 2)[..., None] * cand_desc

    n_tgt = cache["n_tgt"]
    g_tgt_pts = np.zeros((n_tgt, 3))
    np.add.at(g_tgt_pts, cand_idx.reshape(-1), g_cand_pts.reshape(-1, 3))
    g_tgt_desc = np.zeros((n_tgt, c))
    np.add.at(g_tgt_desc, cand_idx.reshape(-1), g_cand_desc.reshape(-1, c))
    g_tgt_unc = np.zeros(n_tgt)
    np.add.at(g_tgt_unc, cand_idx.reshape(-1), g_cand_unc.reshape(-1))
    return g_src_pts, g_src_desc, g_src_unc, g_tgt_pts, g_tgt_desc, g_tgt_unc


def build_candidate_features(src: FeatureSet, tgt: FeatureSet, k: int):
    """Retrieve top-k candidates by descriptor-space KNN and assemble features."""
    if k < 1 or k > len(tgt):
        raise ValueError(f"candidate count k={k} must lie in [1, {len(tgt)}]")
    neighbors = knn_search(src.descriptors, tgt.descriptors, k)
    features, _ = assemble_candidate_features(src, tgt, neighbors.indices,
                                              with_similarity=True)
    return features, neighbors


# ---------------------------------------------------------------------------
# Candidate weighting and fusion


def predict_candidate_weights(predictor: CandidatePredictor,
                              features: CandidateFeatures, train: bool):
    n, k = features.geometric.shape[:2]
    rows = np.concatenate(
        [features.geometric.reshape(n * k, -1),
         features.descriptor.reshape(n * k, -1)], axis=1)
    logits, stack_cache = predictor.forward(rows, train)
    weights = nnet.softmax_rows(logits.reshape(n, k))
    cache = {"weights": weights, "geo_dim": features.geometric.shape[-1],
             "stack": stack_cache}
    return weights, cache


def predict_candidate_weights_backward(predictor: CandidatePredictor, cache,
                                       g_weights: np.ndarray):
    weights = cache["weights"]
    n, k = weights.shape
    g_logits = nnet.softmax_rows_backward(g_weights, weights)
    g_rows = predictor.backward(cache["stack"], g_logits.reshape(n * k, 1))
    gd = cache["geo_dim"]
    g_geometric = g_rows[:, :gd].reshape(n, k, gd)
    g_descriptor = g_rows[:, gd:].reshape(n, k, -1)
    return g_geometric, g_descriptor


def fuse_candidates(weights: np.ndarray, cand_pts: np.ndarray,
                    cand_desc: np.ndarray):
    """Convex combination of candidate coordinates and descriptors per row."""
    fused_pts = (weights[..., None] * cand_pts).sum(axis=1)
    fused_desc = (weights[..., None] * cand_desc).sum(axis=1)
    return fused_pts, fused_desc


def fuse_candidates_backward(weights, cand_pts, cand_desc, g_fused_pts, g_fused_desc):
    g_weights = (cand_pts * g_fused_pts[:, None, :]).sum(-1)
    g_weights += (cand_desc * g_fused_desc[:, None, :]).sum(-1)
    g_cand_pts = weights[..., None] * g_fused_pts[:, None, :]
    g_cand_desc = weights[..., None] * g_fused_desc[:, None, :]
    return g_weights, g_cand_pts, g_cand_desc


# ---------------------------------------------------------------------------
# Weighted SVD (Kabsch) with analytic backward


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def weighted_svd_forward(src_pts: np.ndarray, tgt_pts: np.ndarray,
                         weights: np.ndarray):
    """Minimize sum_i w_i ||R s_i + t - q_i||^2; returns (transform, cache)."""
    src_pts = np.asarray(src_pts, dtype=np.float64)
    tgt_pts = np.asarray(tgt_pts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = len(src_pts)
    if n < 3:
        raise DegeneracyError(f"need at least 3 correspondences, got {n}")
    if src_pts.shape != (n, 3) or tgt_pts.shape != (n, 3) or len(weights) != n:
        raise ValueError("shape mismatch between points and weights")
    if weights.min() < 0:
        raise ValueError("weights must be nonnegative")
    if weights.max() == 0.0:
        raise DegeneracyError("all correspondence weights are zero")
    w = weights + WEIGHT_FLOOR
    total = w.sum()
    c_src = w @ src_pts / total
    c_tgt = w @ tgt_pts / total
    s_cent = src_pts - c_src
    t_cent = tgt_pts - c_tgt
    h = (w[:, None] * s_cent).T @ t_cent
    u, sing, vt = np.linalg.svd(h)
    if sing[1] <= 1e-10 * max(sing[0], 1e-300):
        raise DegeneracyError("correspondence geometry is rank deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = c_tgt - rot @ c_src
    transform = RigidTransform(rot, trans)
    cache = {"w": w, "total": total, "c_src": c_src, "c_tgt": c_tgt,
             "s_cent": s_cent, "t_cent": t_cent, "h": h, "rot": rot,
             "src": src_pts, "tgt": tgt_pts}
    return transform, cache


def weighted_svd(src_pts, tgt_pts, weights) -> RigidTransform:
    transform, _ = weighted_svd_forward(src_pts, tgt_pts, weights)
    return transform


def weighted_svd_backward(cache, g_rot: np.ndarray, g_trans: np.ndarray):
    """Exact gradients of the SVD solution w.r.t. points and weights.

    Uses implicit differentiation of the Procrustes optimality condition
    (H R symmetric), which stays valid under repeated singular values as
    long as the problem itself is nondegenerate.
    """
    w, total = cache["w"], cache["total"]
    c_src, c_tgt = cache["c_src"], cache["c_tgt"]
    s_cent, t_cent = cache["s_cent"], cache["t_cent"]
    h, rot = cache["h"], cache["rot"]

    g_c_tgt = g_trans.copy()
    g_rot_total = g_rot - np.outer(g_trans, c_src)
    g_c_src = -rot.T @ g_trans

    sym = h @ rot
    a = np.trace(sym) * np.eye(3) - sym
    z = _vee(0.5 * (rot.T @ g_rot_total - g_rot_total.T @ rot))
    try:
        u = np.linalg.solve(a, z)
    except np.linalg.LinAlgError:
        u = np.linalg.lstsq(a, z, rcond=None)[0]
    g_h = -2.0 * skew(u) @ rot.T

    g_weights = np.einsum("ni,ij,nj->n", s_cent, g_h, t_cent)
    g_s_cent = w[:, None] * (t_cent @ g_h.T)
    g_t_cent = w[:, None] * (s_cent @ g_h)

    g_src = g_s_cent.copy()
    g_c_src = g_c_src - g_s_cent.sum(axis=0)
    g_tgt = g_t_cent.copy()
    g_c_tgt = g_c_tgt - g_t_cent.sum(axis=0)

    g_src += np.outer(w, g_c_src) / total
    g_weights += (cache["src"] - c_src) @ g_c_src / total
    g_tgt += np.outer(w, g_c_tgt) / total
    g_weights += (cache["tgt"] - c_tgt) @ g_c_tgt / total
    return g_src, g_tgt, g_weights


# ---------------------------------------------------------------------------
# Differentiable coarse head and full coarse registration


@dataclass
class CoarseDiagnostics:
    src_total: int
    src_kept: int
    tgt_total: int
    tgt_kept: int
    mean_confidence: float


def coarse_head_forward(src: FeatureSet, tgt: FeatureSet, cand_idx: np.ndarray,
                        predictor: CandidatePredictor, confidence: ConfidenceHead,
                        train: bool):
    """Features -> weights -> fusion -> confidence -> weighted SVD.

    Operates on already purified feature sets with a fixed candidate index
    matrix; returns (transform, correspondences, cache).
    """
    features, feat_cache = assemble_candidate_features(src, tgt, cand_idx,
                                                       with_similarity=True)
    weights, pred_cache = predict_candidate_weights(predictor, features, train)
    cand_pts = tgt.points[cand_idx]
    cand_desc = tgt.descriptors[cand_idx]
    fused_pts, fused_desc = fuse_candidates(weights, cand_pts, cand_desc)
    conf, conf_cache = confidence.forward(fused_desc)
    transform, svd_cache = weighted_svd_forward(src.points, fused_pts, conf)
    corr = WeightedCorrespondences(fused_pts, fused_desc, weights, conf)
    cache = {"feat": feat_cache, "pred": pred_cache, "svd": svd_cache,
             "weights": weights, "cand_pts": cand_pts, "cand_desc": cand_desc,
             "cand_idx": cand_idx, "n_tgt": len(tgt), "conf": conf_cache}
    return transform, corr, cache


def coarse_head_backward(cache, predictor: CandidatePredictor,
                         confidence: ConfidenceHead, g_rot, g_trans):
    """Backward through the coarse head; returns gradients w.r.t. the
    purified source/target feature-set arrays."""
    g_src_svd, g_fused_pts, g_conf = weighted_svd_backward(cache["svd"], g_rot, g_trans)
    g_fused_desc = confidence.backward(cache["conf"], g_conf)
    g_weights, g_cand_pts, g_cand_desc = fuse_candidates_backward(
        cache["weights"], cache["cand_pts"], cache["cand_desc"],
        g_fused_pts, g_fused_desc)
    g_geo, g_desc = predict_candidate_weights_backward(predictor, cache["pred"],
                                                       g_weights)
    (g_src_pts, g_src_desc, g_src_unc,
     g_tgt_pts, g_tgt_desc, g_tgt_unc) = assemble_candidate_features_backward(
        cache["feat"], g_geo, g_desc)
    g_src_pts += g_src_svd
    cand_idx = cache["cand_idx"]
    np.add.at(g_tgt_pts, cand_idx.reshape(-1), g_cand_pts.reshape(-1, 3))
    np.add.at(g_tgt_desc, cand_idx.reshape(-1),
              g_cand_desc.reshape(-1, g_cand_desc.shape[-1]))
    return (g_src_pts, g_src_desc, g_src_unc), (g_tgt_pts, g_tgt_desc, g_tgt_unc)


def purify(fs: FeatureSet, mask: np.ndarray) -> FeatureSet:
    return FeatureSet(fs.points[mask], fs.descriptors[mask], fs.uncertainties[mask])


def coarse_register(src_cloud, tgt_cloud, backbone: Backbone,
                    predictor: CandidatePredictor, confidence: ConfidenceHead,
                    *, gmm_components: int = 8, bgmm_topk: int = 2,
                    candidates: int = 3, seed: int = 0):
    """Full coarse stage on raw clouds (inference mode).

    Returns (transform, diagnostics, src_backbone_out, tgt_backbone_out,
    coarse masks) so the fine stage can reuse the backbone outputs.
    """
    src_out = backbone.forward(src_cloud, seed=seed, train=False)
    tgt_out = backbone.forward(tgt_cloud, seed=seed, train=False)

    src_model = bgmm.fit_gmm(src_out.coarse.points, gmm_components, seed=seed)
    tgt_model = bgmm.fit_gmm(tgt_out.coarse.points, gmm_components, seed=seed)
    _, _, src_mask, tgt_mask = bgmm.remove_outliers(
        src_model, src_out.coarse.points, tgt_model, tgt_out.coarse.points,
        k=bgmm_topk)
    src_pure = purify(src_out.coarse, src_mask)
    tgt_pure = purify(tgt_out.coarse, tgt_mask)

    if candidates > len(tgt_pure):
        raise DegeneracyError(
            f"coarse: only {len(tgt_pure)} purified targets for k={candidates}")
    neighbors = knn_search(src_pure.descriptors, tgt_pure.descriptors, candidates)
    try:
        transform, corr, _ = coarse_head_forward(
            src_pure, tgt_pure, neighbors.indices, predictor, confidence,
            train=False)
    except DegeneracyError as exc:
        raise DegeneracyError(f"coarse: {exc}") from exc

    diag = CoarseDiagnostics(
        src_total=len(src_out.coarse), src_kept=int(src_mask.sum()),
        tgt_total=len(tgt_out.coarse), tgt_kept=int(tgt_mask.sum()),
        mean_confidence=float(corr.confidences.mean()))
    return transform, diag, src_out, tgt_out, (src_mask, tgt_mask)
