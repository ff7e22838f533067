"""Distillation losses: attention adaptation, feature and response terms,
uncertainty weighting, the focal-depth term, and the combined objective.

Teacher tensors are detached inside every loss, so no gradient can reach
teacher parameters even if the caller forgets to freeze them.

Reduction conventions, fixed so logged values are reproducible:
pixel-space losses (silog, response, depth score) reduce per image over the
mask and then average over the batch; feature-space losses average over all
elements of a level. Constant factors are applied after the reductions,
which keeps the s = 0 reference identities exact in floating point
(umf against half the feature loss, umr against sqrt(2) times the mean
absolute gap).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gradcheck import grad_check
from .nets import PYRAMID_CHANNELS, ModelParams, NetOutput, init_params, rearrange_logvar
from .tensor import (
    NumericsError,
    ShapeError,
    Tensor,
    absolute,
    matmul,
    softmax_lastdim,
    transpose,
)

P_MIN = 1e-4
EPS_DEPTH = 1e-3
SILOG_ALPHA = 10.0
SILOG_LAMBDA = 0.85


@dataclass(frozen=True)
class DistillSettings:
    lam1: float = 0.9  # response distillation weight
    lam2: float = 0.6  # feature distillation weight
    lam3: float = 0.8  # focal-depth weight
    alpha_d: float = 1.0
    gamma: float = 2.0
    distill: bool = True  # False: plain supervised baseline, l_b only
    use_focal: bool = True
    use_uem: bool = True
    use_attention: bool = True


@dataclass
class LossBreakdown:
    l_b: float
    l_umr: float
    l_umf: float
    l_focal: float
    l_e: float
    l_d: float
    l_rd: float
    p_d: float
    total: float
    lam1: float
    lam2: float
    lam3: float
    loss: Optional[Tensor] = None  # live graph node for backward()


def _as_mask(mask, like: np.ndarray) -> np.ndarray:
    m = np.ones_like(like) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != like.shape:
        raise ShapeError(f"mask shape {m.shape} does not match maps {like.shape}")
    return m


def _per_image_masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """(N,1,H,W) values -> (N,) means over each image's mask."""
    counts = mask.sum(axis=(1, 2, 3))
    if np.any(counts == 0):
        raise ValueError("empty mask: an image has no valid pixels")
    return (values * Tensor(mask)).sum(axes=(1, 2, 3)) / Tensor(counts)


def attention_adapt(feature: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                    use_attention: bool = True) -> Tensor:
    """Self-attention over the h*w token positions of one pyramid level.

    Tokens of dim C are projected to Q, K, V; output is
    softmax(Q Kt / sqrt(C)) V reshaped back to the feature layout. With
    use_attention off this degrades to the per-token linear map V alone
    (the 1x1-projection ablation).
    """
    if feature.ndim != 4:
        raise ShapeError(f"expected (N, C, h, w) feature, got {feature.shape}")
    n, c, h, w = feature.shape
    for m in (w_q, w_k, w_v):
        if m.shape != (c, c):
            raise ShapeError(f"projection shape {m.shape} does not match {c} channels")
    tokens = transpose(feature.reshape((n, c, h * w)), (0, 2, 1))  # (N, T, C)
    v = matmul(tokens, w_v)
    if use_attention:
        q = matmul(tokens, w_q)
        k = matmul(tokens, w_k)
        scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(c))
        out = matmul(softmax_lastdim(scores), v)
    else:
        out = v
    return transpose(out, (0, 2, 1)).reshape((n, c, h, w))


def adapt_pyramid(levels: list, adapter: ModelParams, side: str,
                  use_attention: bool = True) -> list:
    """Apply the per-level adaptation to a 4-level pyramid."""
    out = []
    for lvl, f in enumerate(levels):
        out.append(attention_adapt(
            f,
            adapter[f"adapt_{side}{lvl}_q"],
            adapter[f"adapt_{side}{lvl}_k"],
            adapter[f"adapt_{side}{lvl}_v"],
            use_attention=use_attention,
        ))
    return out


def feature_distill(f_t_levels: list, f_s_levels: list) -> Tensor:
    """Mean squared teacher-student feature gap, averaged over the 4 levels."""
    if len(f_t_levels) != 4 or len(f_s_levels) != 4:
        raise ShapeError("feature pyramids must have exactly 4 levels")
    acc = None
    for f_t, f_s in zip(f_t_levels, f_s_levels):
        if f_t.shape != f_s.shape:
            raise ShapeError(f"level shapes differ: {f_t.shape} vs {f_s.shape}")
        term = ((f_s - f_t.detach()) ** 2).mean()
        acc = term if acc is None else acc + term
    return acc / 4.0


def depth_distill_score(d_t: Tensor, d_s: Tensor, mask=None) -> Tensor:
    """(N,) per-image score p_d = 1 - mean |(d_t - d_s)/d_t|, clamped to [p_min, 1]."""
    if d_t.shape != d_s.shape:
        raise ShapeError(f"depth shapes differ: {d_t.shape} vs {d_s.shape}")
    m = _as_mask(mask, d_t.data)
    if np.any((d_t.data <= EPS_DEPTH) & (m > 0)):
        raise ValueError(f"teacher depth at or below {EPS_DEPTH} m inside the mask")
    d_t = d_t.detach()
    rel = absolute((d_t - d_s) / d_t)
    p_raw = 1.0 - _per_image_masked_mean(rel, m)
    return p_raw.clamp(P_MIN, 1.0)


def focal_depth_loss(p_d: Tensor, alpha_d: float = 1.0, gamma: float = 2.0) -> Tensor:
    """-alpha_d * (1 - p_d)^gamma * log(p_d), averaged over the batch."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if gamma == 0:
        per_image = -alpha_d * p_d.log()
    else:
        per_image = -alpha_d * ((1.0 - p_d) ** gamma) * p_d.log()
    return per_image.mean()


def response_distill_l1(d_t: Tensor, d_s: Tensor, mask=None) -> Tensor:
    """Summed absolute depth gap over masked pixels (a sum, not a mean)."""
    if d_t.shape != d_s.shape:
        raise ShapeError(f"depth shapes differ: {d_t.shape} vs {d_s.shape}")
    m = _as_mask(mask, d_t.data)
    return (absolute(d_s - d_t.detach()) * Tensor(m)).sum()


def response_distill_mean(d_t: Tensor, d_s: Tensor, mask=None) -> Tensor:
    """Masked mean absolute gap, per image then batch (the no-UEM response term)."""
    if d_t.shape != d_s.shape:
        raise ShapeError(f"depth shapes differ: {d_t.shape} vs {d_s.shape}")
    m = _as_mask(mask, d_t.data)
    return _per_image_masked_mean(absolute(d_s - d_t.detach()), m).mean()


def umf_loss(f_t_enc: list, f_t_dec: list, f_s_enc: list, f_s_dec: list,
             log_var_levels: list) -> Tensor:
    """Gaussian uncertainty-weighted feature loss over all 8 level instances.

    Per element: exp(-s)/2 * (f_t - f_s)^2 + s/2, with the level's pooled s
    broadcast across channels; element means are averaged per pyramid, then
    the two pyramid averages are averaged.
    """
    def pyramid_avg(f_ts, f_ss):
        if len(f_ts) != 4 or len(f_ss) != 4 or len(log_var_levels) != 4:
            raise ShapeError("expected 4-level pyramids and 4 log-variance maps")
        acc = None
        for f_t, f_s, s in zip(f_ts, f_ss, log_var_levels):
            if f_t.shape != f_s.shape:
                raise ShapeError(f"level shapes differ: {f_t.shape} vs {f_s.shape}")
            if s.shape[0] != f_t.shape[0] or s.shape[2:] != f_t.shape[2:]:
                raise ShapeError(
                    f"log variance {s.shape} does not match feature level {f_t.shape}")
            sq = (f_s - f_t.detach()) ** 2
            term = (0.5 * (-1.0 * s).exp() * sq + 0.5 * s).mean()
            acc = term if acc is None else acc + term
        return acc / 4.0

    enc_avg = pyramid_avg(f_t_enc, f_s_enc)
    dec_avg = pyramid_avg(f_t_dec, f_s_dec)
    return (enc_avg + dec_avg) / 2.0


def umr_loss(d_t: Tensor, d_s: Tensor, log_var: Tensor, mask=None) -> Tensor:
    """Laplace uncertainty-weighted response loss.

    Per masked pixel: sqrt(2)*exp(-s)*|d_t - d_s| + s; the constant factors
    over the weighted gap and the s regularizer at the end, after the
    per-image/batch means (equal by linearity, and it keeps the s = 0
    identity against sqrt(2)*mean|gap| exact).
    """
    if not (d_t.shape == d_s.shape == log_var.shape):
        raise ShapeError(
            f"shapes differ: {d_t.shape} vs {d_s.shape} vs {log_var.shape}")
    m = _as_mask(mask, d_t.data)
    gap = absolute(d_s - d_t.detach())
    weighted = _per_image_masked_mean((-1.0 * log_var).exp() * gap, m).mean()
    reg = _per_image_masked_mean(log_var, m).mean()
    return np.sqrt(2.0) * weighted + reg


def silog_loss(d_pred: Tensor, d_gt: Tensor, mask=None,
               alpha: float = SILOG_ALPHA, lambda_v: float = SILOG_LAMBDA) -> Tensor:
    """Scale-invariant log loss, per image then averaged over the batch."""
    if d_pred.shape != d_gt.shape:
        raise ShapeError(f"depth shapes differ: {d_pred.shape} vs {d_gt.shape}")
    m = _as_mask(mask, d_gt.data)
    on = m > 0
    if np.any((d_gt.data <= 0) & on) or np.any((d_pred.data <= 0) & on):
        raise ValueError("non-positive depth inside the mask")
    counts = m.sum(axis=(1, 2, 3))
    if np.any(counts == 0):
        raise ValueError("empty mask: an image has no valid pixels")
    mt = Tensor(m)
    # off-mask pixels are rewritten to 1 so their log is exactly 0
    g = (d_pred * mt + (1.0 - mt)).log() - (d_gt * mt + (1.0 - mt)).log()
    n = Tensor(counts)
    mean_g2 = (g * g).sum(axes=(1, 2, 3)) / n
    mean_g = g.sum(axes=(1, 2, 3)) / n
    # the variance-like radicand is non-negative mathematically but rounding
    # can push a constant-g case to -1e-17; rectify so sqrt stays in domain
    # (the gradient at an exactly perfect prediction is undefined anyway)
    per_image = alpha * (mean_g2 - lambda_v * mean_g * mean_g).relu().sqrt()
    return per_image.mean()


def _finite_term(name: str, fn):
    try:
        out = fn()
    except NumericsError as e:
        raise NumericsError(f"loss term {name} produced a non-finite value: {e}") from e
    if not np.all(np.isfinite(out.data)):
        raise NumericsError(f"loss term {name} produced a non-finite value")
    return out


def total_student_loss(student_out: NetOutput, teacher_out: Optional[NetOutput],
                       d_gt: Tensor, adapter: Optional[ModelParams],
                       settings: DistillSettings = DistillSettings(),
                       mask=None) -> LossBreakdown:
    """Assemble the student objective l_b + lam1*umr + lam2*umf + lam3*focal.

    With settings.distill off (or no teacher output), only the supervised
    silog term remains and the distillation slots are zero. The returned
    breakdown's total always satisfies the bookkeeping identity against its
    own terms exactly.
    """
    zero = Tensor(np.zeros(()))
    l_b = _finite_term("l_b", lambda: silog_loss(student_out.depth, d_gt, mask))

    use_distill = settings.distill and teacher_out is not None
    if use_distill:
        if adapter is None:
            raise ValueError("distillation requires adapter parameters")
        s_enc = adapt_pyramid(student_out.enc, adapter, "enc", settings.use_attention)
        s_dec = adapt_pyramid(student_out.dec, adapter, "dec", settings.use_attention)
        l_e = _finite_term("l_e", lambda: feature_distill(teacher_out.enc, s_enc))
        l_d = _finite_term("l_d", lambda: feature_distill(teacher_out.dec, s_dec))
        l_rd = _finite_term(
            "l_rd", lambda: response_distill_l1(teacher_out.depth, student_out.depth, mask))
        if settings.use_uem:
            s_levels = rearrange_logvar(student_out.log_var)
            l_umf = _finite_term("l_umf", lambda: umf_loss(
                teacher_out.enc, teacher_out.dec, s_enc, s_dec, s_levels))
            l_umr = _finite_term("l_umr", lambda: umr_loss(
                teacher_out.depth, student_out.depth, student_out.log_var, mask))
        else:
            l_umf = _finite_term("l_umf", lambda: (l_e + l_d) / 2.0)
            l_umr = _finite_term("l_umr", lambda: response_distill_mean(
                teacher_out.depth, student_out.depth, mask))
        p_d = _finite_term("p_d", lambda: depth_distill_score(
            teacher_out.depth, student_out.depth, mask))
        if settings.use_focal:
            l_focal = _finite_term("l_focal", lambda: focal_depth_loss(
                p_d, settings.alpha_d, settings.gamma))
        else:
            l_focal = zero
        p_d_value = float(p_d.mean().data)
    else:
        l_e = l_d = l_rd = l_umf = l_umr = l_focal = zero
        p_d_value = 0.0

    total = ((l_b + settings.lam1 * l_umr) + settings.lam2 * l_umf) + settings.lam3 * l_focal
    return LossBreakdown(
        l_b=float(l_b.data),
        l_umr=float(l_umr.data),
        l_umf=float(l_umf.data),
        l_focal=float(l_focal.data),
        l_e=float(l_e.data),
        l_d=float(l_d.data),
        l_rd=float(l_rd.data),
        p_d=p_d_value,
        total=float(total.data),
        lam1=settings.lam1,
        lam2=settings.lam2,
        lam3=settings.lam3,
        loss=total,
    )


def _suite_pyramids(rng, channels=(2, 3, 4, 5), spatial=((8, 8), (4, 4), (2, 2), (1, 1))):
    """Random teacher/student pyramids kept close enough to stay kink-free."""
    teacher, student, s_levels = [], [], []
    for c, (h, w) in zip(channels, spatial):
        t = rng.uniform(-1.0, 1.0, size=(1, c, h, w))
        teacher.append(Tensor(t))
        student.append(Tensor(t + rng.uniform(0.1, 0.5, size=t.shape), requires_grad=True))
        s_levels.append(Tensor(rng.uniform(-2.0, 2.0, size=(1, 1, h, w)), requires_grad=True))
    return teacher, student, s_levels


def _suite_depths(rng, shape=(2, 1, 6, 8)):
    """Teacher/student depth pairs with gaps bounded away from the |.| kink."""
    d_s = Tensor(rng.uniform(2.0, 10.0, size=shape), requires_grad=True)
    d_t = Tensor(d_s.data * rng.uniform(1.05, 1.3, size=shape))
    return d_t, d_s


def loss_grad_suite(seed: int = 0, coords: int = 32) -> list:
    """Finite-difference sweep over every loss term and the combined total.

    Inputs are seeded random tensors placed strictly inside every clamp and
    away from absolute-value kinks, so central differences are trustworthy.
    Returns one GradReport per checked parameter tensor.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    reports = []

    def run(tag, fn, params, n_coords=coords):
        named = {f"{tag}.{k}": v for k, v in params.items()}
        reports.extend(grad_check(fn, named, seed=seed, coords=n_coords))

    c = 4
    feat = Tensor(rng.uniform(-1.0, 1.0, size=(1, c, 3, 3)), requires_grad=True)
    w_q = Tensor(rng.uniform(-0.5, 0.5, size=(c, c)), requires_grad=True)
    w_k = Tensor(rng.uniform(-0.5, 0.5, size=(c, c)), requires_grad=True)
    w_v = Tensor(rng.uniform(-0.5, 0.5, size=(c, c)), requires_grad=True)
    run("attention", lambda: attention_adapt(feat, w_q, w_k, w_v).mean(),
        {"feature": feat, "w_q": w_q, "w_k": w_k, "w_v": w_v})

    f_t, f_s, s_lv = _suite_pyramids(rng)
    run("feature", lambda: feature_distill(f_t, f_s),
        {f"level{i}": t for i, t in enumerate(f_s)})

    d_t, d_s = _suite_depths(rng)
    run("focal", lambda: focal_depth_loss(depth_distill_score(d_t, d_s)), {"d_s": d_s})
    run("response", lambda: response_distill_l1(d_t, d_s), {"d_s": d_s})

    g_t, g_s, _ = _suite_pyramids(rng)
    umf_params = {f"enc{i}": t for i, t in enumerate(f_s)}
    umf_params.update({f"dec{i}": t for i, t in enumerate(g_s)})
    umf_params.update({f"s{i}": t for i, t in enumerate(s_lv)})
    run("umf", lambda: umf_loss(f_t, g_t, f_s, g_s, s_lv), umf_params)

    log_var = Tensor(rng.uniform(-2.0, 2.0, size=d_s.shape), requires_grad=True)
    run("umr", lambda: umr_loss(d_t, d_s, log_var), {"d_s": d_s, "log_var": log_var})

    gt = Tensor(rng.uniform(3.0, 30.0, size=d_s.shape))
    run("silog", lambda: silog_loss(d_s, gt), {"d_pred": d_s})

    # combined objective through real adapter weights at the pyramid channel
    # counts; student-side tensors all require grad
    t_out, s_out, s_params = _composite_outputs(rng)
    adapter = init_params("adapter", seed)
    d_gt = Tensor(rng.uniform(3.0, 30.0, size=(1, 1, 32, 32)))
    params = dict(s_params)
    params.update({f"adapter.{n}": t for n, t in adapter.items()})
    run("total", lambda: total_student_loss(s_out, t_out, d_gt, adapter).loss,
        params, n_coords=min(coords, 8))
    return reports


def _composite_outputs(rng, spatial=((8, 8), (4, 4), (2, 2), (1, 1))):
    def constants():
        return [Tensor(rng.uniform(-1.0, 1.0, (1, c, h, w)))
                for c, (h, w) in zip(PYRAMID_CHANNELS, spatial)]

    def near(levels):
        return [Tensor(t.data + rng.uniform(0.1, 0.3, t.data.shape), requires_grad=True)
                for t in levels]

    t_enc, t_dec = constants(), constants()
    s_enc, s_dec = near(t_enc), near(t_dec)
    d_t = Tensor(rng.uniform(4.0, 30.0, size=(1, 1, 32, 32)))
    d_s = Tensor(d_t.data * rng.uniform(1.05, 1.25, size=d_t.shape), requires_grad=True)
    log_var = Tensor(rng.uniform(-2.0, 2.0, size=(1, 1, 32, 32)), requires_grad=True)
    t_out = NetOutput(enc=t_enc, dec=t_dec, depth=d_t, log_var=Tensor(np.zeros((1, 1, 32, 32))))
    s_out = NetOutput(enc=s_enc, dec=s_dec, depth=d_s, log_var=log_var)
    params = {"depth": d_s, "log_var": log_var}
    params.update({f"enc{i}": t for i, t in enumerate(s_enc)})
    params.update({f"dec{i}": t for i, t in enumerate(s_dec)})
    return t_out, s_out, params
