"""Training losses and their analytic gradients.

Three terms: a cross-entropy classification loss on positive samples over all
N+M tuned text features, a loss pushing negative samples away from the ID
labels (log of the ID probability mass), and a knowledge-regularization term
keeping tuned features close to the pre-trained ones (feature, logit, or
probability variant). Gradients are derived by hand, including through the L2
normalization (projection Jacobian) and the relu (subgradient 0 at 0); a
central-difference oracle cross-checks them.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadClassIndex,
    DimMismatch,
    EmptyBatch,
    InvalidConfig,
    NoNegativeLabels,
    NonPositiveTemperature,
    ZeroNorm,
)
from .model import mlp_residual
from .numerics import as_f64, logsumexp, stable_softmax

KR_VARIANTS = ("feature", "logits", "prob")
KR_SCOPES = ("pos", "both")


@dataclass
class Batch:
    pos_features: np.ndarray  # (n_p, D)
    pos_labels: np.ndarray  # (n_p,) int
    neg_features: np.ndarray  # (n_n, D)

    @property
    def n_pos(self):
        return self.pos_features.shape[0]

    @property
    def n_neg(self):
        return self.neg_features.shape[0]


@dataclass
class LossReport:
    l_pos: float
    l_neg: float
    l_kr: float
    total: float
    n_pos: int
    n_neg: int


def zero_gradients(state):
    return {k: np.zeros_like(v) for k, v in state.params().items()}


def _check_tau(tau):
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")


def loss_positive(state, bank, v_p, y, tau):
    """Cross-entropy of class y over all N+M tuned-feature similarities."""
    _check_tau(tau)
    if not 0 <= y < bank.n_pos:
        raise BadClassIndex(f"class index {y} outside [0, {bank.n_pos})")
    from .model import transform_bank

    v_p = as_f64(v_p)
    logits = (transform_bank(state, bank, v_p) @ v_p) / tau
    return float(logsumexp(logits) - logits[y])


def loss_negative(state, bank, v_n, tau):
    """log of the ID probability mass for a negative sample; always <= 0."""
    _check_tau(tau)
    if bank.n_neg == 0:
        raise NoNegativeLabels("negative loss requires at least one negative label")
    from .model import transform_bank

    v_n = as_f64(v_n)
    logits = (transform_bank(state, bank, v_n) @ v_n) / tau
    return float(logsumexp(logits[: bank.n_pos]) - logsumexp(logits))


def loss_kr_feature(bank, transformed):
    """Mean (1 - c . c') over all rows; 0 iff every row is unchanged."""
    rows = bank.rows()
    transformed = as_f64(transformed)
    if transformed.shape != rows.shape:
        raise DimMismatch("transformed bank shape does not match original")
    # unit rows keep the true value in [0, 2]; clamp float dust below zero
    return max(0.0, float(np.mean(1.0 - np.sum(rows * transformed, axis=1))))


def loss_kr_logits(bank, transformed, v):
    """Mean squared gap between original and tuned logits for image v."""
    rows = bank.rows()
    transformed = as_f64(transformed)
    v = as_f64(v)
    if transformed.shape != rows.shape or v.shape != (rows.shape[1],):
        raise DimMismatch("transformed bank / image feature shape mismatch")
    gap = rows @ v - transformed @ v
    return float(np.mean(gap * gap))


def loss_kr_prob(bank, transformed, v):
    """Cross-entropy between softmax of original and tuned logits (tau omitted)."""
    rows = bank.rows()
    transformed = as_f64(transformed)
    v = as_f64(v)
    if transformed.shape != rows.shape or v.shape != (rows.shape[1],):
        raise DimMismatch("transformed bank / image feature shape mismatch")
    p = stable_softmax(rows @ v)
    t = transformed @ v
    log_q = t - logsumexp(t)
    return float(-np.sum(p * log_q))


def _validate_cfg(cfg):
    if cfg.kr_variant not in KR_VARIANTS:
        raise InvalidConfig(f"unknown kr_variant {cfg.kr_variant!r}")
    if cfg.kr_scope not in KR_SCOPES:
        raise InvalidConfig(f"unknown kr_scope {cfg.kr_scope!r}")


def _validate_batch(bank, batch):
    if batch.n_pos == 0 and batch.n_neg == 0:
        raise EmptyBatch("batch has neither positive nor negative samples")
    if batch.n_pos and (
        np.min(batch.pos_labels) < 0 or np.max(batch.pos_labels) >= bank.n_pos
    ):
        raise BadClassIndex("batch contains a class index outside the bank")
    if batch.n_neg and bank.n_neg == 0:
        raise NoNegativeLabels("negative samples require negative labels in the bank")


def _lse_rows(x):
    m = np.max(x, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=1, keepdims=True))).ravel()


def total_loss(state, bank, batch, cfg):
    """Mean losses over the batch combined per the lambda weights in cfg.

    Vectorized over all images in the batch; each image's transformed bank
    is computed once and shared between the task loss and the
    knowledge-regularization term.
    """
    _validate_cfg(cfg)
    _validate_batch(bank, batch)
    _check_tau(cfg.tau_loss)
    tau = cfg.tau_loss
    n = bank.n_pos
    parts = []
    if batch.n_pos:
        parts.append(as_f64(batch.pos_features))
    if batch.n_neg:
        parts.append(as_f64(batch.neg_features))
    imgs = np.vstack(parts)
    n_imgs = imgs.shape[0]

    s_parts = []  # per-role cosines with the tuned rows, (B, K_role)
    dot_parts = []  # per-role dot(c, c'), (B, K_role)
    for role, c in (("positive", bank.pos), ("negative", bank.neg)):
        if c.shape[0] == 0:
            continue
        if state.mode in ("const_shift", "mlp"):
            # tuned rows do not depend on the image feature
            if state.mode == "const_shift":
                u = c + state.head(role).beta[0]
            else:
                u = c + mlp_residual(state.net(role), c)
            norms = np.sqrt(np.sum(u * u, axis=1))
            if np.any(norms <= 1e-12):
                raise ZeroNorm("transform produced a zero vector")
            cp = u / norms[:, None]
            s_parts.append(imgs @ cp.T)
            dot_parts.append(np.broadcast_to(np.sum(c * cp, axis=1), (n_imgs, c.shape[0])))
        else:
            head = state.head(role)
            net = state.net(role)
            z = imgs @ net.w1.T + net.b1
            h = np.maximum(z, 0.0)
            beta = head.beta + h @ net.w_beta.T + net.b_beta
            if state.mode == "scale_shift":
                alpha = head.alpha + h @ net.w_alpha.T + net.b_alpha
            else:
                alpha = np.ones_like(beta)
            u = alpha[:, None, :] * c[None, :, :] + beta[:, None, :]
            norms = np.sqrt(np.sum(u * u, axis=2))
            if np.any(norms <= 1e-12):
                raise ZeroNorm("transform produced a zero vector")
            cp = u / norms[..., None]
            s_parts.append(np.einsum("bkd,bd->bk", cp, imgs))
            dot_parts.append(np.einsum("bkd,kd->bk", cp, c))

    s = np.hstack(s_parts)
    logits = s / tau
    lse_all = _lse_rows(logits)
    l_pos = 0.0
    l_neg = 0.0
    if batch.n_pos:
        idx = np.arange(batch.n_pos)
        picked = logits[idx, batch.pos_labels.astype(int)]
        l_pos = float(np.mean(lse_all[: batch.n_pos] - picked))
    if batch.n_neg:
        neg_logits = logits[batch.n_pos :]
        l_neg = float(np.mean(_lse_rows(neg_logits[:, :n]) - lse_all[batch.n_pos :]))

    n_kr = batch.n_pos + (batch.n_neg if cfg.kr_scope == "both" else 0)
    if n_kr:
        scope = slice(0, n_kr)  # positives come first in imgs
        if cfg.kr_variant == "feature":
            dots = np.hstack(dot_parts)
            kr_per_img = np.mean(1.0 - dots[scope], axis=1)
        elif cfg.kr_variant == "logits":
            t0 = imgs[scope] @ bank.rows().T
            gap = s[scope] - t0
            kr_per_img = np.mean(gap * gap, axis=1)
        else:
            t0 = imgs[scope] @ bank.rows().T
            m0 = np.max(t0, axis=1, keepdims=True)
            e0 = np.exp(t0 - m0)
            p0 = e0 / np.sum(e0, axis=1, keepdims=True)
            log_q = s[scope] - _lse_rows(s[scope])[:, None]
            kr_per_img = -np.sum(p0 * log_q, axis=1)
        l_kr = float(np.mean(kr_per_img))
    else:
        l_kr = 0.0

    total = l_pos + cfg.lambda1 * l_neg + cfg.lambda2 * l_kr
    return LossReport(
        l_pos=float(l_pos),
        l_neg=float(l_neg),
        l_kr=float(l_kr),
        total=float(total),
        n_pos=batch.n_pos,
        n_neg=batch.n_neg,
    )


@dataclass
class _RoleCache:
    role: str
    c: np.ndarray  # original rows
    cp: np.ndarray  # tuned rows
    norms: np.ndarray
    # affine modes
    a: np.ndarray = None
    z: np.ndarray = None  # trunk pre-activation on v
    h: np.ndarray = None
    # mlp mode
    z_rows: np.ndarray = None  # trunk pre-activations per row
    h_rows: np.ndarray = None


def _forward_image(state, bank, v):
    """Transform the whole bank for one image, keeping backprop caches."""
    caches = []
    for role, c in (("positive", bank.pos), ("negative", bank.neg)):
        if c.shape[0] == 0:
            continue
        if state.mode == "mlp":
            net = state.net(role)
            z_rows = c @ net.w1.T + net.b1
            h_rows = np.maximum(z_rows, 0.0)
            u = c + h_rows @ net.w_beta.T + net.b_beta
            cache = _RoleCache(role=role, c=c, cp=None, norms=None,
                               z_rows=z_rows, h_rows=h_rows)
        else:
            head = state.head(role)
            z = h = None
            if state.mode == "const_shift":
                a = np.ones(state.dim)
                b = np.full(state.dim, head.beta[0])
            else:
                net = state.net(role)
                z = net.w1 @ v + net.b1
                h = np.maximum(z, 0.0)
                if state.mode == "vec_shift":
                    a = np.ones(state.dim)
                    b = head.beta + (net.w_beta @ h + net.b_beta)
                else:  # scale_shift
                    a = head.alpha + (net.w_alpha @ h + net.b_alpha)
                    b = head.beta + (net.w_beta @ h + net.b_beta)
            u = a * c + b
            cache = _RoleCache(role=role, c=c, cp=None, norms=None, a=a, z=z, h=h)
        norms = np.sqrt(np.sum(u * u, axis=1))
        if np.any(norms <= 1e-12):
            raise ZeroNorm("transform produced a zero vector during backward")
        cache.norms = norms
        cache.cp = u / norms[:, None]
        caches.append(cache)
    rows = np.vstack([cc.cp for cc in caches])
    return rows, caches


def _backprop_transform(state, caches, grad_rows, v, grads):
    """Accumulate dL/dparams given dL/d(tuned rows)."""
    offset = 0
    for cache in caches:
        k = cache.c.shape[0]
        g = grad_rows[offset : offset + k]
        offset += k
        # through L2 normalization: (I - cp cp^T) / ||u||
        gu = (g - np.sum(g * cache.cp, axis=1, keepdims=True) * cache.cp)
        gu = gu / cache.norms[:, None]
        prefix = "pos" if cache.role == "positive" else "neg"
        if state.mode == "mlp":
            net = state.net(cache.role)
            grads[f"{prefix}_net.w_beta"] += gu.T @ cache.h_rows
            grads[f"{prefix}_net.b_beta"] += gu.sum(axis=0)
            dz = (gu @ net.w_beta) * (cache.z_rows > 0)
            grads[f"{prefix}_net.w1"] += dz.T @ cache.c
            grads[f"{prefix}_net.b1"] += dz.sum(axis=0)
            continue
        db = gu.sum(axis=0)
        if state.mode == "const_shift":
            grads[f"{prefix}_head.beta"][0] += float(db.sum())
            continue
        net = state.net(cache.role)
        grads[f"{prefix}_head.beta"] += db
        grads[f"{prefix}_net.w_beta"] += np.outer(db, cache.h)
        grads[f"{prefix}_net.b_beta"] += db
        dh = net.w_beta.T @ db
        if state.mode == "scale_shift":
            da = np.sum(gu * cache.c, axis=0)
            grads[f"{prefix}_head.alpha"] += da
            grads[f"{prefix}_net.w_alpha"] += np.outer(da, cache.h)
            grads[f"{prefix}_net.b_alpha"] += da
            dh = dh + net.w_alpha.T @ da
        dz = dh * (cache.z > 0)
        grads[f"{prefix}_net.w1"] += np.outer(dz, v)
        grads[f"{prefix}_net.b1"] += dz


def backward(state, bank, batch, cfg):
    """Loss report plus analytic gradients of the total loss."""
    _validate_cfg(cfg)
    _validate_batch(bank, batch)
    tau = cfg.tau_loss
    _check_tau(tau)
    n = bank.n_pos
    rows0 = bank.rows()
    k = rows0.shape[0]
    grads = zero_gradients(state)

    n_kr = batch.n_pos + (batch.n_neg if cfg.kr_scope == "both" else 0)
    w_kr = cfg.lambda2 / n_kr if n_kr else 0.0

    l_pos_sum = 0.0
    l_neg_sum = 0.0
    kr_sum = 0.0

    samples = [
        ("pos", batch.pos_features[i], int(batch.pos_labels[i]))
        for i in range(batch.n_pos)
    ] + [("neg", batch.neg_features[i], None) for i in range(batch.n_neg)]

    for kind, v, y in samples:
        v = as_f64(v)
        rows, caches = _forward_image(state, bank, v)
        s = rows @ v
        logits = s / tau
        ds = np.zeros(k)
        g_rows = np.zeros((k, rows.shape[1]))
        in_scope = kind == "pos" or cfg.kr_scope == "both"

        if kind == "pos":
            if not 0 <= y < n:
                raise BadClassIndex(f"class index {y} outside [0, {n})")
            lse = logsumexp(logits)
            l_pos_sum += lse - logits[y]
            p = np.exp(logits - lse)
            dl = p.copy()
            dl[y] -= 1.0
            ds += (1.0 / batch.n_pos) * dl / tau
        else:
            if bank.n_neg == 0:
                raise NoNegativeLabels("negative sample with no negative labels")
            lse_id = logsumexp(logits[:n])
            lse_all = logsumexp(logits)
            l_neg_sum += lse_id - lse_all
            p = np.exp(logits - lse_all)
            dl = -p
            dl[:n] += np.exp(logits[:n] - lse_id)
            ds += (cfg.lambda1 / batch.n_neg) * dl / tau

        if in_scope:
            if cfg.kr_variant == "feature":
                kr_sum += float(np.mean(1.0 - np.sum(rows0 * rows, axis=1)))
                g_rows += (-w_kr / k) * rows0
            elif cfg.kr_variant == "logits":
                t0 = rows0 @ v
                gap = s - t0
                kr_sum += float(np.mean(gap * gap))
                ds += w_kr * 2.0 * gap / k
            else:  # prob
                p0 = stable_softmax(rows0 @ v)
                log_q = s - logsumexp(s)
                kr_sum += float(-np.sum(p0 * log_q))
                q = np.exp(log_q)
                ds += w_kr * (q - p0)

        g_rows += ds[:, None] * v
        _backprop_transform(state, caches, g_rows, v, grads)

    l_pos = l_pos_sum / batch.n_pos if batch.n_pos else 0.0
    l_neg = l_neg_sum / batch.n_neg if batch.n_neg else 0.0
    l_kr = kr_sum / n_kr if n_kr else 0.0
    report = LossReport(
        l_pos=float(l_pos),
        l_neg=float(l_neg),
        l_kr=float(l_kr),
        total=float(l_pos + cfg.lambda1 * l_neg + cfg.lambda2 * l_kr),
        n_pos=batch.n_pos,
        n_neg=batch.n_neg,
    )
    return report, grads


def finite_diff_grad(state, bank, batch, cfg, eps=1e-5):
    """Central-difference gradients of the total loss, per scalar parameter."""
    if eps <= 0:
        raise InvalidConfig(f"eps must be > 0, got {eps}")
    grads = zero_gradients(state)
    params = state.params()
    for key, arr in params.items():
        flat = arr.reshape(-1)
        out = grads[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = total_loss(state, bank, batch, cfg).total
            flat[i] = orig - eps
            f_minus = total_loss(state, bank, batch, cfg).total
            flat[i] = orig
            out[i] = (f_plus - f_minus) / (2.0 * eps)
    return grads


def fd_well_conditioned(state, bank, batch, grads,
                        min_grad=2e-6, min_relu_margin=1e-4):
    """Whether a random instance is resolvable by the float64 fd oracle.

    Central differences at eps=1e-5 carry an absolute rounding-noise floor of
    roughly 1e-10, so gradient coordinates much below ~1e-6 cannot be checked
    reliably; instances with such coordinates (or with a relu pre-activation
    close enough to its kink that the eps probe crosses it) should be redrawn
    rather than compared against the oracle.
    """
    vals = np.concatenate([g.ravel() for g in grads.values()])
    nz = np.abs(vals[vals != 0.0])
    if nz.size and float(nz.min()) < min_grad:
        return False
    parts = []
    if batch.n_pos:
        parts.append(batch.pos_features)
    if batch.n_neg:
        parts.append(batch.neg_features)
    imgs = np.vstack(parts)
    for net in (state.pos_net, state.neg_net):
        z = imgs @ net.w1.T + net.b1
        if float(np.min(np.abs(z))) < min_relu_margin:
            return False
        if state.mode == "mlp":
            z_rows = bank.rows() @ net.w1.T + net.b1
            if float(np.min(np.abs(z_rows))) < min_relu_margin:
                return False
    return True


def max_relative_error(analytic, numeric):
    """max over parameters of |a - n| / max(1e-8, |a| + |n|)."""
    worst = 0.0
    for key in analytic:
        a = analytic[key].reshape(-1)
        b = numeric[key].reshape(-1)
        denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
        err = float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
        worst = max(worst, err)
    return worst
