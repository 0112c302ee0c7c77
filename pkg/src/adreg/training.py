"""Loss functions, synthetic scene generation, the trainable registration
model, and the end-to-end training loop.

The fine stage trains single-step: the ground-truth correspondence is noised
to a uniformly drawn diffusion step and the denoiser predicts it back
(teacher forcing composes the decoded step onto the true transform).
Discrete structure (sampling plans, GMM masks, candidate indices, the
noise draw) is frozen per step so the loss is a smooth function of the
parameters; ground-truth correspondences are supervision constants.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bgmm, coarse, diffusion
from .backbone import Backbone, FeatureSet
from .coarse import (CandidatePredictor, ConfidenceHead, DegeneracyError,
                     coarse_head_backward, coarse_head_forward, purify)
from .geometry import (RigidTransform, apply_transform, as_points, compose,
                       knn_search, random_rigid_transform, voxel_downsample)
from .io import Checkpoint, RunConfig, load_config
from .nnet import Adam, Param

OUTLIER_MIN_RADIUS = 20.0
OUTLIER_MAX_RADIUS = 35.0
# Minimum distance between source-side and target-side clusters (compared in
# the target frame): far enough that an isolated cluster can never be the
# bidirectional top-k partner of the other side's cluster.
OUTLIER_SIDE_SEPARATION = 40.0


@dataclass(frozen=True)
class LossWeights:
    rot: float = 4.0    # alpha
    trans: float = 1.0  # beta
    diff: float = 1.0   # gamma


# ---------------------------------------------------------------------------
# Loss terms


def translation_loss(t_est: np.ndarray, t_gt: np.ndarray):
    """Euclidean distance and its gradient w.r.t. the estimate."""
    delta = t_est - t_gt
    value = float(np.linalg.norm(delta))
    grad = delta / value if value > 1e-12 else np.zeros(3)
    return value, grad


def rotation_loss(r_est: np.ndarray, r_gt: np.ndarray):
    """Frobenius norm of (R_est^T R_gt - I) and its gradient w.r.t. R_est."""
    m = r_est.T @ r_gt - np.eye(3)
    value = float(np.linalg.norm(m))
    grad = r_gt @ m.T / value if value > 1e-12 else np.zeros((3, 3))
    return value, grad


def loss_total(est_coarse: RigidTransform, est_fine: RigidTransform,
               gt: RigidTransform, c0_hat: np.ndarray, c_gt: np.ndarray,
               weights: LossWeights):
    """Weighted two-stage transform loss plus the diffusion MSE.

    Returns (total, per-term dict, gradient dict); gradients already carry
    the stage weights.
    """
    if c0_hat.shape != c_gt.shape:
        raise ValueError("correspondence shapes differ")
    ltc, gtc = translation_loss(est_coarse.translation, gt.translation)
    lrc, grc = rotation_loss(est_coarse.rotation, gt.rotation)
    ltf, gtf = translation_loss(est_fine.translation, gt.translation)
    lrf, grf = rotation_loss(est_fine.rotation, gt.rotation)
    resid = c0_hat - c_gt
    ldiff = float((resid ** 2).mean())
    total = (weights.trans * (ltc + ltf) + weights.rot * (lrc + lrf)
             + weights.diff * ldiff)
    terms = {"trans_coarse": ltc, "trans_fine": ltf, "rot_coarse": lrc,
             "rot_fine": lrf, "diff": ldiff,
             "trans": ltc + ltf, "rot": lrc + lrf}
    grads = {"coarse_trans": weights.trans * gtc,
             "coarse_rot": weights.rot * grc,
             "fine_trans": weights.trans * gtf,
             "fine_rot": weights.rot * grf,
             "c0_hat": weights.diff * 2.0 * resid / resid.size}
    return total, terms, grads


# ---------------------------------------------------------------------------
# Synthetic scene generation


@dataclass
class SyntheticPair:
    source: np.ndarray
    target: np.ndarray
    transform: RigidTransform
    source_outlier_mask: np.ndarray
    target_outlier_mask: np.ndarray


def _scene_points(rng: np.random.Generator, n_points: int) -> np.ndarray:
    """Sparse outdoor-like structure: anisotropic blobs and planar patches."""
    n_prim = int(rng.integers(6, 13))
    counts = np.full(n_prim, n_points // n_prim)
    counts[: n_points - counts.sum()] += 1
    chunks = []
    for count in counts:
        center = rng.uniform([-15, -15, -3], [15, 15, 3])
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if rng.uniform() < 0.6:
            scales = rng.uniform(0.3, 1.5, size=3)
            local = rng.normal(size=(count, 3)) * scales
        else:
            extent = rng.uniform(1.5, 4.0, size=2)
            local = np.column_stack([
                rng.uniform(-extent[0], extent[0], size=count),
                rng.uniform(-extent[1], extent[1], size=count),
                rng.normal(scale=0.02, size=count)])
        chunks.append(center + local @ rot.T)
    return np.vstack(chunks)


def _outlier_cluster(rng: np.random.Generator, size: int,
                     avoid: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """A compact far-field cluster kept away from the opposite side's clusters."""
    center = None
    for _ in range(256):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * rng.uniform(OUTLIER_MIN_RADIUS, OUTLIER_MAX_RADIUS)
        if all(np.linalg.norm(center - c) >= OUTLIER_SIDE_SEPARATION for c in avoid):
            break
    pts = center + rng.normal(scale=rng.uniform(0.3, 0.6), size=(size, 3))
    return pts, center


def gen_synthetic_pair(rng: np.random.Generator, n_points: int,
                       max_rot_deg: float, max_trans: float, jitter: float,
                       outlier_clusters: int) -> SyntheticPair:
    """Source scene, its rigidly moved jittered copy, and per-side far-field
    outlier clusters (masked)."""
    if n_points < 64:
        raise ValueError("need at least 64 points per cloud")
    source_in = _scene_points(rng, n_points)
    transform = random_rigid_transform(rng, max_rot_deg, max_trans)
    target_in = apply_transform(transform, source_in)
    if jitter > 0:
        target_in = target_in + rng.normal(scale=jitter, size=target_in.shape)

    cluster_size = max(16, n_points // 25)
    src_centers_tgt_frame: list[np.ndarray] = []
    src_chunks, tgt_chunks = [], []
    for _ in range(outlier_clusters):
        pts, center = _outlier_cluster(rng, cluster_size, avoid=[])
        src_chunks.append(pts)
        src_centers_tgt_frame.append(transform.rotation @ center + transform.translation)
    for _ in range(outlier_clusters):
        pts, _ = _outlier_cluster(rng, cluster_size, avoid=src_centers_tgt_frame)
        tgt_chunks.append(pts)

    source = np.vstack([source_in] + src_chunks) if src_chunks else source_in
    target = np.vstack([target_in] + tgt_chunks) if tgt_chunks else target_in
    src_mask = np.zeros(len(source), dtype=bool)
    src_mask[len(source_in):] = True
    tgt_mask = np.zeros(len(target), dtype=bool)
    tgt_mask[len(target_in):] = True
    return SyntheticPair(source, target, transform, src_mask, tgt_mask)


# ---------------------------------------------------------------------------
# Model assembly


class RegistrationModel:
    """Backbone, coarse predictor/confidence, denoiser, fine confidence."""

    def __init__(self, config: RunConfig):
        self.config = config
        root = np.random.SeedSequence([config.seed, 0xAD])
        streams = [np.random.default_rng(s) for s in root.spawn(5)]
        self.backbone = Backbone(streams[0], scale=config.backbone_scale)
        coarse_dim = self.backbone.configs[2].widths[-1]
        fine_dim = self.backbone.configs[1].widths[-1]
        self.predictor = CandidatePredictor(coarse_dim, streams[1])
        self.coarse_confidence = ConfidenceHead(coarse_dim, streams[2])
        self.denoiser = diffusion.Denoiser(fine_dim, streams[3])
        self.fine_confidence = ConfidenceHead(fine_dim, streams[4])
        self.schedule = diffusion.make_schedule(
            config.diffusion_steps, config.beta_start, config.beta_end)

    def named_params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for name, p in self.backbone.named_params("backbone"):
            out[name] = p
        for name, p in self.predictor.named_params("predictor"):
            out[name] = p
        for name, p in self.coarse_confidence.named_params("coarse_confidence"):
            out[name] = p
        for name, p in self.denoiser.named_params("denoiser"):
            out[name] = p
        for name, p in self.fine_confidence.named_params("fine_confidence"):
            out[name] = p
        return out

    def _buffer_modules(self):
        yield from self.backbone.named_buffers("backbone")
        yield from self.predictor.named_buffers("predictor")
        yield from self.denoiser.named_buffers("denoiser")

    def zero_grads(self):
        for p in self.named_params().values():
            p.zero_grad()

    def to_checkpoint(self, optimizer: Adam | None = None) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for name, p in self.named_params().items():
            tensors[f"param.{name}"] = p.value.reshape(-1).copy()
        for name, buf in self._buffer_modules():
            tensors[f"buffer.{name}"] = buf.reshape(-1).copy()
        tensors["schedule.betas"] = self.schedule.betas.copy()
        for fname, value in vars(self.config).items():
            tensors[f"config.{fname}"] = np.array([float(value)])
        if optimizer is not None:
            tensors.update(optimizer.state_tensors())
        return Checkpoint(tensors=tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RegistrationModel":
        import dataclasses

        kwargs = {}
        for f in dataclasses.fields(RunConfig):
            key = f"config.{f.name}"
            if key in ckpt.tensors:
                raw = float(ckpt.tensors[key][0])
                kwargs[f.name] = int(raw) if f.type in (int, "int") else raw
        model = cls(RunConfig(**kwargs))
        for name, p in model.named_params().items():
            key = f"param.{name}"
            if key not in ckpt.tensors:
                raise KeyError(f"checkpoint lacks tensor '{key}'")
            flat = ckpt.tensors[key]
            if flat.size != p.value.size:
                raise ValueError(f"size mismatch for '{key}'")
            p.value = flat.reshape(p.value.shape).copy()
            p.grad = np.zeros_like(p.value)
        for name, buf in model._buffer_modules():
            key = f"buffer.{name}"
            if key in ckpt.tensors:
                buf[...] = ckpt.tensors[key].reshape(buf.shape)
        betas = ckpt.tensors.get("schedule.betas")
        if betas is not None:
            alphas = 1.0 - betas
            model.schedule = diffusion.NoiseSchedule(
                betas.copy(), alphas, np.concatenate([[1.0], np.cumprod(alphas)]))
        return model

    def make_optimizer(self) -> Adam:
        return Adam(self.named_params(), lr=self.config.learning_rate)


def preprocess_cloud(cloud, config: RunConfig, seed: int) -> np.ndarray:
    """Voxel-downsample, then randomly subsample to the configured budget."""
    pts = voxel_downsample(as_points(cloud), config.voxel_size)
    if len(pts) > config.sample_count:
        rng = np.random.default_rng([seed, 0x5A])
        keep = rng.choice(len(pts), size=config.sample_count, replace=False)
        pts = pts[np.sort(keep)]
    return pts


# ---------------------------------------------------------------------------
# Training step: frozen context + differentiable core


@dataclass
class StepContext:
    """Discrete decisions frozen for one training step."""

    gt: RigidTransform
    src_plans: tuple
    tgt_plans: tuple
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    coarse_cand_idx: np.ndarray
    fine_cand_idx: np.ndarray
    c_gt: np.ndarray
    t: int
    c_t: np.ndarray


def make_step_context(model: RegistrationModel, pair: SyntheticPair,
                      rng: np.random.Generator):
    """Fix plans, masks, candidates, supervision, and the noise draw.

    Returns (context, src_backbone_out, tgt_backbone_out); the outputs carry
    caches so the training step can reuse this forward pass.
    """
    cfg = model.config
    src_out = model.backbone.forward(pair.source, seed=cfg.seed, train=True,
                                     want_cache=True)
    tgt_out = model.backbone.forward(pair.target, seed=cfg.seed, train=True,
                                     want_cache=True)

    src_model = bgmm.fit_gmm(src_out.coarse.points, cfg.gmm_components, seed=cfg.seed)
    tgt_model = bgmm.fit_gmm(tgt_out.coarse.points, cfg.gmm_components, seed=cfg.seed)
    _, _, src_mask, tgt_mask = bgmm.remove_outliers(
        src_model, src_out.coarse.points, tgt_model, tgt_out.coarse.points,
        k=cfg.bgmm_topk)
    src_pure = purify(src_out.coarse, src_mask)
    tgt_pure = purify(tgt_out.coarse, tgt_mask)
    if len(src_pure) < 3 or len(tgt_pure) < cfg.candidates:
        raise DegeneracyError("purified coarse sets too small for training step")
    coarse_cand = knn_search(src_pure.descriptors, tgt_pure.descriptors,
                             cfg.candidates).indices

    c_gt, fine_neighbors = diffusion.build_gt_correspondence(
        src_out.fine.points, tgt_out.fine.points, pair.transform,
        k=cfg.candidates, reg=cfg.sinkhorn_reg, iters=cfg.sinkhorn_iters)
    t = int(rng.integers(1, cfg.diffusion_steps + 1))
    eps = rng.standard_normal(size=c_gt.shape)
    c_t = diffusion.q_sample(model.schedule, c_gt, t, eps)
    ctx = StepContext(pair.transform, src_out.plans, tgt_out.plans,
                      src_mask, tgt_mask, coarse_cand, fine_neighbors.indices,
                      c_gt, t, c_t)
    return ctx, src_out, tgt_out


def training_loss(model: RegistrationModel, pair: SyntheticPair,
                  ctx: StepContext, train: bool = True,
                  compute_grads: bool = True, grad_scale: float = 1.0,
                  outputs=None):
    """Evaluate the full two-stage loss under a frozen context; optionally
    backpropagate ``grad_scale`` times its gradient into the parameters.

    ``outputs`` may carry the (src, tgt) backbone outputs produced while the
    context was built, saving their recomputation.
    """
    cfg = model.config
    weights = LossWeights(rot=cfg.rot_weight, trans=cfg.trans_weight,
                          diff=cfg.diff_weight)
    if outputs is not None:
        src_out, tgt_out = outputs
    else:
        src_out = model.backbone.forward(pair.source, seed=cfg.seed, train=train,
                                         plans=ctx.src_plans, want_cache=True)
        tgt_out = model.backbone.forward(pair.target, seed=cfg.seed, train=train,
                                         plans=ctx.tgt_plans, want_cache=True)
    src_pure = purify(src_out.coarse, ctx.src_mask)
    tgt_pure = purify(tgt_out.coarse, ctx.tgt_mask)
    est_coarse, _, coarse_cache = coarse_head_forward(
        src_pure, tgt_pure, ctx.coarse_cand_idx, model.predictor,
        model.coarse_confidence, train)

    warped = apply_transform(ctx.gt, src_out.fine.points)
    f_g, fg_cache = diffusion.fine_geometric_features(
        warped, tgt_out.fine.points, ctx.fine_cand_idx)
    f_d = diffusion.fine_descriptor_features(src_out.fine, tgt_out.fine,
                                             ctx.fine_cand_idx)
    c0_hat, den_cache = diffusion.denoiser_forward(
        model.denoiser, ctx.c_t, ctx.t, model.schedule.n_steps, f_g, f_d, train)
    step_tf, c2t_cache = diffusion.correspondence_to_transform(
        c0_hat, warped, ctx.fine_cand_idx, tgt_out.fine.points,
        tgt_out.fine.descriptors, model.fine_confidence,
        temperature=cfg.decode_temperature)
    est_fine = compose(step_tf, ctx.gt)

    total, terms, grads = loss_total(est_coarse, est_fine, ctx.gt, c0_hat,
                                     ctx.c_gt, weights)
    if not compute_grads:
        return total, terms

    s = grad_scale
    # Coarse stage: loss -> SVD -> head -> purified sets -> full coarse sets.
    (g_sp, g_sd, g_su), (g_tp, g_td, g_tu) = coarse_head_backward(
        coarse_cache, model.predictor, model.coarse_confidence,
        s * grads["coarse_rot"], s * grads["coarse_trans"])

    def scatter(mask, grad, shape):
        full = np.zeros(shape)
        full[mask] = grad
        return full

    g_coarse_src = (scatter(ctx.src_mask, g_sp, src_out.coarse.points.shape),
                    scatter(ctx.src_mask, g_sd, src_out.coarse.descriptors.shape),
                    scatter(ctx.src_mask, g_su, src_out.coarse.uncertainties.shape))
    g_coarse_tgt = (scatter(ctx.tgt_mask, g_tp, tgt_out.coarse.points.shape),
                    scatter(ctx.tgt_mask, g_td, tgt_out.coarse.descriptors.shape),
                    scatter(ctx.tgt_mask, g_tu, tgt_out.coarse.uncertainties.shape))

    # Fine stage: est_fine = step o gt, so d(step) pulls gt along.
    g_step_rot = (s * grads["fine_rot"]) @ ctx.gt.rotation.T
    g_step_rot += np.outer(s * grads["fine_trans"], ctx.gt.translation)
    g_step_trans = s * grads["fine_trans"]
    g_c0, g_warped, g_tgt_fp, g_tgt_fd = diffusion.correspondence_to_transform_backward(
        c2t_cache, model.fine_confidence, g_step_rot, g_step_trans)
    g_c0 = g_c0 + s * grads["c0_hat"]
    _, g_f_g, g_f_d = diffusion.denoiser_backward(model.denoiser, den_cache, g_c0)
    g_warped2, g_tgt_fp2 = diffusion.fine_geometric_features_backward(fg_cache, g_f_g)
    g_src_fp = (g_warped + g_warped2) @ ctx.gt.rotation
    fine_c = src_out.fine.descriptors.shape[1]
    g_src_fd, g_src_fu, g_tgt_fd2, g_tgt_fu = diffusion.fine_descriptor_features_backward(
        g_f_d, fine_c, ctx.fine_cand_idx, len(tgt_out.fine))

    model.backbone.backward(src_out, g_coarse=g_coarse_src,
                            g_fine=(g_src_fp, g_src_fd, g_src_fu))
    model.backbone.backward(tgt_out, g_coarse=g_coarse_tgt,
                            g_fine=(g_tgt_fp + g_tgt_fp2, g_tgt_fd + g_tgt_fd2,
                                    g_tgt_fu))
    return total, terms


# ---------------------------------------------------------------------------
# Full-pair inference


@dataclass
class RegistrationResult:
    transform: RigidTransform
    coarse_transform: RigidTransform
    diagnostics: coarse.CoarseDiagnostics
    buffer: diffusion.TransformBuffer
    trace: list[diffusion.TraceRow]


def register_pair(model: RegistrationModel, src_cloud, tgt_cloud, *,
                  seed: int = 0, steps: int | None = None, candidates: int | None = None,
                  gt: RigidTransform | None = None,
                  preprocess: bool = True) -> RegistrationResult:
    """Run the full coarse + autoregressive fine pipeline on a cloud pair."""
    cfg = model.config
    k = candidates if candidates is not None else cfg.candidates
    if preprocess:
        src_cloud = preprocess_cloud(src_cloud, cfg, seed)
        tgt_cloud = preprocess_cloud(tgt_cloud, cfg, seed + 1)
    coarse_tf, diag, src_out, tgt_out, _ = coarse.coarse_register(
        src_cloud, tgt_cloud, model.backbone, model.predictor,
        model.coarse_confidence, gmm_components=cfg.gmm_components,
        bgmm_topk=cfg.bgmm_topk, candidates=k, seed=seed)
    final, buffer, trace = diffusion.autoregressive_infer(
        coarse_tf, src_out.fine, tgt_out.fine, model.denoiser,
        model.fine_confidence, model.schedule, k=k,
        steps=steps if steps is not None else cfg.sampling_steps,
        seed=seed, temperature=cfg.decode_temperature, gt=gt)
    return RegistrationResult(final, coarse_tf, diag, buffer, trace)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochLog:
    epoch: int
    loss_trans: float
    loss_rot: float
    loss_diff: float
    val_rte: float
    val_rre: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: list[EpochLog]
    aborted: bool = False
    skipped_samples: int = 0
    seconds: float = 0.0


def generate_dataset(config: RunConfig, n_pairs: int, stream: int) -> list[SyntheticPair]:
    rng = np.random.default_rng([config.seed, stream])
    return [gen_synthetic_pair(rng, config.train_points, config.max_rot_deg,
                               config.max_trans, config.jitter,
                               config.outlier_clusters)
            for _ in range(n_pairs)]


def load_pair_dir(path) -> list[tuple[np.ndarray, np.ndarray, RigidTransform]]:
    """Read make-synthetic output: pair_NNNN_{src,tgt}.ply plus gt.txt."""
    from .io import read_ply, read_pose_file

    base = Path(path)
    poses = read_pose_file(base / "gt.txt")
    pairs = []
    for i, record in enumerate(poses):
        src = read_ply(base / f"pair_{i:04d}_src.ply")
        tgt = read_ply(base / f"pair_{i:04d}_tgt.ply")
        pairs.append((src, tgt, record.transform))
    return pairs


def _preprocess_pair(pair: SyntheticPair, config: RunConfig, idx: int) -> SyntheticPair:
    return SyntheticPair(preprocess_cloud(pair.source, config, config.seed + 2 * idx),
                         preprocess_cloud(pair.target, config, config.seed + 2 * idx + 1),
                         pair.transform, pair.source_outlier_mask,
                         pair.target_outlier_mask)


def learning_rate_at(config: RunConfig, epoch: int) -> float:
    return config.learning_rate * config.lr_decay ** (epoch // config.lr_decay_every)


def train(config: RunConfig, data_dir=None, log_path=None,
          progress: bool = False) -> TrainResult:
    """Train all stages jointly; returns the checkpoint and per-epoch log.

    A non-finite loss aborts training and the last good epoch checkpoint is
    returned with ``aborted=True``.
    """
    started = time.perf_counter()
    model = RegistrationModel(config)
    optimizer = model.make_optimizer()

    if data_dir is not None:
        raw = [SyntheticPair(s, t, g, np.zeros(len(s), bool), np.zeros(len(t), bool))
               for s, t, g in load_pair_dir(data_dir)]
        train_pairs = [_preprocess_pair(p, config, i) for i, p in enumerate(raw)]
        val_pairs = raw[: max(1, len(raw) // 8)]  # register_pair preprocesses
    else:
        train_raw = generate_dataset(config, config.train_pairs, stream=1)
        val_raw = generate_dataset(config, config.val_pairs, stream=2)
        train_pairs = [_preprocess_pair(p, config, i) for i, p in enumerate(train_raw)]
        val_pairs = val_raw  # register_pair preprocesses on its own

    rng_train = np.random.default_rng([config.seed, 3])
    logs: list[EpochLog] = []
    skipped = 0
    last_good = model.to_checkpoint(optimizer)
    for epoch in range(config.epochs):
        optimizer.lr = learning_rate_at(config, epoch)
        order = rng_train.permutation(len(train_pairs))
        sums = {"trans": 0.0, "rot": 0.0, "diff": 0.0}
        seen = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            used = 0
            batch_terms = []
            for idx in batch:
                pair = train_pairs[idx]
                try:
                    ctx, src_out, tgt_out = make_step_context(model, pair, rng_train)
                    total, terms = training_loss(model, pair, ctx, train=True,
                                                 grad_scale=1.0 / len(batch),
                                                 outputs=(src_out, tgt_out))
                except DegeneracyError:
                    skipped += 1
                    continue
                if not np.isfinite(total):
                    return TrainResult(last_good, logs, aborted=True,
                                       skipped_samples=skipped,
                                       seconds=time.perf_counter() - started)
                batch_terms.append(terms)
                used += 1
            if used == 0:
                continue
            optimizer.step()
            for terms in batch_terms:
                sums["trans"] += terms["trans"]
                sums["rot"] += terms["rot"]
                sums["diff"] += terms["diff"]
            seen += used

        val_rte, val_rre = _validate(model, val_pairs)
        denom = max(seen, 1)
        logs.append(EpochLog(epoch, sums["trans"] / denom, sums["rot"] / denom,
                             sums["diff"] / denom, val_rte, val_rre))
        last_good = model.to_checkpoint(optimizer)
        if progress:
            log = logs[-1]
            print(f"epoch {log.epoch:3d} lr {optimizer.lr:.2e} "
                  f"trans {log.loss_trans:.4f} rot {log.loss_rot:.4f} "
                  f"diff {log.loss_diff:.4f} val_rte {log.val_rte:.3f} "
                  f"val_rre {log.val_rre:.3f}", flush=True)

    if log_path is not None:
        write_training_log(log_path, logs)
    return TrainResult(last_good, logs, aborted=False, skipped_samples=skipped,
                       seconds=time.perf_counter() - started)


def _validate(model: RegistrationModel, val_pairs) -> tuple[float, float]:
    rtes, rres = [], []
    for pair in val_pairs:
        try:
            result = register_pair(model, pair.source, pair.target,
                                   seed=model.config.seed)
        except (DegeneracyError, diffusion.NumericalError):
            continue
        rte = float(np.linalg.norm(result.transform.translation
                                   - pair.transform.translation))
        cos = np.clip((np.trace(pair.transform.rotation.T
                                @ result.transform.rotation) - 1) / 2, -1, 1)
        rtes.append(rte)
        rres.append(float(np.degrees(np.arccos(cos))))
    if not rtes:
        return float("nan"), float("nan")
    return float(np.mean(rtes)), float(np.mean(rres))


def write_training_log(path, logs: list[EpochLog]) -> None:
    lines = ["epoch,loss_trans,loss_rot,loss_diff,val_rte,val_rre"]
    for log in logs:
        lines.append(f"{log.epoch},{log.loss_trans!r},{log.loss_rot!r},"
                     f"{log.loss_diff!r},{log.val_rte!r},{log.val_rre!r}")
    Path(path).write_text("\n".join(lines) + "\n")
