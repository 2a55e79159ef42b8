"""Loss functions with hand-derived gradients.

Each loss returns a :class:`LossValue` holding the scalar and one gradient
array per input. Batched variants average over the leading axis. The
autodiff engine wraps these as graph nodes (see ``trajssl.nn.tensor``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRAJ_EPS = 1e-8


@dataclass
class LossValue:
    value: float
    gradients: tuple

    def __post_init__(self):
        self.value = float(self.value)
        self.gradients = tuple(np.asarray(g) for g in self.gradients)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _project(v, z):
    return v - np.sum(v * z, axis=-1, keepdims=True) * z


def traj_loss(z_left, z_center, z_right, eps: float = TRAJ_EPS) -> LossValue:
    """Trajectory regularizer: negative cosine of the two tangent steps at z_center.

    With ``v1 = zC - zL`` and ``v2 = zR - zC`` projected onto the tangent
    plane at ``zC``, the loss is ``-(u1.u2) / ((|u1|+eps)(|u2|+eps))``.
    Inputs may be single vectors or (B, d) batches; a batch returns the
    mean. Triplets whose two tangent steps are both shorter than ``eps``
    contribute 0 with zero gradient.
    """
    single = np.ndim(z_left) == 1
    zl, zc, zr = _as_batch(z_left), _as_batch(z_center), _as_batch(z_right)
    n = zl.shape[0]

    v1 = zc - zl
    v2 = zr - zc
    u1 = _project(v1, zc)
    u2 = _project(v2, zc)
    n1 = np.linalg.norm(u1, axis=1)
    n2 = np.linalg.norm(u2, axis=1)
    a = n1 + eps
    b = n2 + eps
    s = np.sum(u1 * u2, axis=1)
    live = ~((n1 < eps) & (n2 < eps))

    values = np.where(live, -s / (a * b), 0.0)

    # d/du of -s/(ab), with |u| derivatives u/|u| (0 at u = 0).
    inv1 = np.divide(1.0, n1, out=np.zeros_like(n1), where=n1 > 0)
    inv2 = np.divide(1.0, n2, out=np.zeros_like(n2), where=n2 > 0)
    g_u1 = -u2 / (a * b)[:, None] + (s / (a * a * b) * inv1)[:, None] * u1
    g_u2 = -u1 / (a * b)[:, None] + (s / (a * b * b) * inv2)[:, None] * u2
    g_u1 *= live[:, None] / n
    g_u2 *= live[:, None] / n

    def back_project(g_u, v):
        g_v = _project(g_u, zc)
        g_z = -np.sum(g_u * zc, axis=1, keepdims=True) * v - np.sum(v * zc, axis=1, keepdims=True) * g_u
        return g_v, g_z

    g_v1, g_zc1 = back_project(g_u1, v1)
    g_v2, g_zc2 = back_project(g_u2, v2)
    g_zl = -g_v1
    g_zr = g_v2
    g_zc = g_v1 - g_v2 + g_zc1 + g_zc2

    value = values.mean()
    if single:
        return LossValue(value, (g_zl[0], g_zc[0], g_zr[0]))
    return LossValue(value, (g_zl, g_zc, g_zr))


def traj_loss_rotation_check(z_left, z_center, z_right, rotation) -> tuple[float, float]:
    """Loss before and after applying one orthogonal map to all three vectors."""
    r = np.asarray(rotation, dtype=np.float64)
    if not np.allclose(r @ r.T, np.eye(r.shape[0]), atol=1e-9):
        raise ValueError("rotation must be orthogonal")
    zs = [_as_batch(z) for z in (z_left, z_center, z_right)]
    before = traj_loss(*zs).value
    after = traj_loss(*(z @ r.T for z in zs)).value
    return before, after


def ntxent_loss(za, zb, temperature: float = 0.5) -> LossValue:
    """Normalized-temperature cross entropy over the 2B x 2B similarity matrix.

    Rows are expected to be L2-normalized already; anchor ``i`` in ``za`` has
    row ``i`` of ``zb`` as its positive and every other row as a negative.
    """
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape or za.ndim != 2:
        raise ValueError("ntxent_loss expects two (B, k) matrices of equal shape")
    b = za.shape[0]
    if b < 2:
        raise ValueError("ntxent_loss needs a batch of at least 2")
    z = np.concatenate([za, zb], axis=0)
    m = 2 * b
    logits = z @ z.T / temperature
    np.fill_diagonal(logits, -np.inf)
    pos = np.concatenate([np.arange(b, m), np.arange(b)])
    rows = np.arange(m)

    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    denom = ex.sum(axis=1, keepdims=True)
    log_z = np.log(denom[:, 0]) + shift[:, 0]
    value = np.mean(log_z - logits[rows, pos])

    g = ex / denom
    g[rows, pos] -= 1.0
    g /= m
    g_z = (g + g.T) @ z / temperature
    return LossValue(value, (g_z[:b], g_z[b:]))


def _variance_term(x, eps=1e-4):
    n, k = x.shape
    xc = x - x.mean(axis=0)
    std = np.sqrt((xc * xc).sum(axis=0) / (n - 1) + eps)
    hinge = np.maximum(0.0, 1.0 - std)
    value = hinge.mean()
    grad = -((std < 1.0) / std)[None, :] * xc / ((n - 1) * k)
    return value, grad


def _covariance_term(x):
    n, k = x.shape
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    off = cov - np.diag(np.diag(cov))
    value = (off * off).sum() / k
    grad = xc @ off * (4.0 / (k * (n - 1)))
    return value, grad


def vicreg_loss(za, zb, sim_coeff: float = 25.0, var_coeff: float = 25.0, cov_coeff: float = 1.0) -> LossValue:
    """Variance-invariance-covariance objective in its usual form.

    invariance: mean squared difference; variance: hinge on
    ``sqrt(var + 1e-4)`` averaged over dims, halved per branch; covariance:
    squared off-diagonal covariance summed and divided by the width.
    """
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape or za.ndim != 2:
        raise ValueError("vicreg_loss expects two (B, k) matrices of equal shape")
    n, k = za.shape
    if n < 2:
        raise ValueError("vicreg_loss needs a batch of at least 2")

    diff = za - zb
    inv = np.mean(diff * diff)
    g_inv = 2.0 * diff / diff.size

    var_a, g_var_a = _variance_term(za)
    var_b, g_var_b = _variance_term(zb)
    cov_a, g_cov_a = _covariance_term(za)
    cov_b, g_cov_b = _covariance_term(zb)

    value = sim_coeff * inv + var_coeff * (var_a + var_b) / 2.0 + cov_coeff * (cov_a + cov_b)
    g_a = sim_coeff * g_inv + var_coeff * g_var_a / 2.0 + cov_coeff * g_cov_a
    g_b = -sim_coeff * g_inv + var_coeff * g_var_b / 2.0 + cov_coeff * g_cov_b
    return LossValue(value, (g_a, g_b))


def total_loss(sem: LossValue, traj: LossValue, lam: float) -> LossValue:
    """Semantic loss plus ``lam`` times the trajectory loss.

    Gradients are the semantic ones followed by the scaled trajectory ones.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    grads = tuple(sem.gradients) + tuple(lam * g for g in traj.gradients)
    return LossValue(sem.value + lam * traj.value, grads)
