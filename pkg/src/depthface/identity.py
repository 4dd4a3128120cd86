"""Online identity estimation over the face model's identity weights.

Per-frame identity weight estimates (regularized least squares over visible
rays) are absorbed into per-person Normal-Inverse-Wishart posteriors, weighted
by each frame's visibility confidence. A store holds one posterior per person
plus the generic prior; samples switch to whichever posterior explains them
best, and samples claimed by the generic prior spawn a new person.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .visibility import VISIBLE

MIN_VISIBLE_RAYS = 50
COV_REG = 1e-8


class UndefinedVarianceError(ValueError):
    """Expected covariance requested from a posterior with too few pseudo-counts."""


@dataclass(frozen=True)
class IdentityModel:
    """Normal-Inverse-Wishart state over one person's identity weights.

    ``alpha`` is that person's running log-scale estimate; its accumulated
    weight is recovered as beta - 1 (every update adds its total sample
    weight to beta, and all models start from the generic's beta = 1).
    """

    m: np.ndarray
    beta: float
    psi: np.ndarray
    nu: float
    alpha: float = 0.0

    @property
    def dim(self):
        return self.m.shape[0]

    def expected(self):
        """Posterior-expected (mean, covariance) of the identity weights."""
        if self.nu <= self.dim + 1:
            raise UndefinedVarianceError(
                "expected covariance needs nu > dim + 1"
            )
        return self.m.copy(), self.psi / (self.nu - self.dim - 1.0)

    def log_density(self, w):
        """Gaussian log-density of w under the expected (mean, covariance)."""
        mu, cov = self.expected()
        cov = cov + COV_REG * np.eye(self.dim)
        diff = np.asarray(w, dtype=np.float64) - mu
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise np.linalg.LinAlgError("expected covariance not positive definite")
        sol = np.linalg.solve(cov, diff)
        return -0.5 * (self.dim * np.log(2.0 * np.pi) + logdet + diff @ sol)


def generic_prior(model):
    """Starting NIW state derived from the face model's identity prior."""
    d = model.mu_id.shape[0]
    nu0 = d + 3.0
    return IdentityModel(
        m=model.mu_id.copy(),
        beta=1.0,
        psi=model.sigma_id * (nu0 - d - 1.0),
        nu=nu0,
        alpha=0.0,
    )


@dataclass
class IdentitySample:
    """One frame's identity evidence: weight estimate, confidence, log-scale."""

    w_id: np.ndarray
    kappa: float
    alpha: float = 0.0


def niw_update(model, samples):
    """Absorb a clip's identity samples into the posterior; pure function.

    Each sample counts with its confidence kappa as a fractional observation.
    Weighted sufficient statistics feed the standard conjugate update; the
    sample alphas join a running kappa-weighted mean with beta - 1 as the
    prior weight. Zero total confidence returns the model unchanged.
    """
    if not samples:
        return model
    W = np.stack([np.asarray(s.w_id, dtype=np.float64) for s in samples])
    k = np.array([s.kappa for s in samples], dtype=np.float64)
    a = np.array([s.alpha for s in samples], dtype=np.float64)
    if W.shape[1] != model.m.shape[0]:
        raise ValueError("sample weights must match the model dimension")
    if (k < 0).any():
        raise ValueError("sample confidences must be non-negative")
    n_c = float(k.sum())
    if n_c <= 0.0:
        return model
    wbar = (k[:, None] * W).sum(axis=0) / n_c
    centered = W - wbar
    S = (k[:, None, None] * np.einsum("ti,tj->tij", centered, centered)).sum(axis=0)

    beta_new = model.beta + n_c
    m_new = (n_c * wbar + model.beta * model.m) / beta_new
    gap = wbar - model.m
    psi_new = model.psi + S + (model.beta * n_c / beta_new) * np.outer(gap, gap)
    nu_new = model.nu + n_c

    prior_weight = max(model.beta - 1.0, 0.0)
    alpha_new = (prior_weight * model.alpha + float((k * a).sum())) / (
        prior_weight + n_c
    )
    return IdentityModel(m_new, beta_new, psi_new, nu_new, alpha_new)


def expected_identity(model):
    """Convenience wrapper over IdentityModel.expected."""
    return model.expected()


@dataclass
class IdentityStore:
    """Generic prior plus the people met so far; index 0 means the generic."""

    generic: IdentityModel
    models: list = field(default_factory=list)
    present_index: int = 0

    @property
    def n_models(self):
        return len(self.models)

    def model_at(self, index):
        return self.generic if index == 0 else self.models[index - 1]

    def present(self):
        return self.model_at(self.present_index)


def switch(w_id, store):
    """Index of the model that best explains w_id; 0 claims a new person."""
    scores = [store.generic.log_density(w_id)]
    scores.extend(mod.log_density(w_id) for mod in store.models)
    return int(np.argmax(scores))


def confidence(labels):
    """Fraction of all rays classified visible; the per-frame sample weight."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float((labels == VISIBLE).sum() / labels.size)


def adapt_clip(store, samples):
    """End-of-clip adaptation: cluster samples by switching, update posteriors.

    Assignments are made against the store state at entry (posteriors update
    only afterwards). Samples claimed by the generic spawn at most one new
    person per clip, seeded from the generic state. The present person becomes
    whichever model the clip's last sample was assigned to. Returns the store.
    """
    if not samples:
        return store
    assign = np.array([switch(s.w_id, store) for s in samples])
    for k in sorted(set(assign.tolist())):
        rows = np.nonzero(assign == k)[0]
        members = [samples[i] for i in rows]
        if k == 0:
            store.models.append(niw_update(store.generic, members))
            assign[rows] = len(store.models)
        else:
            store.models[k - 1] = niw_update(store.models[k - 1], members)
    store.present_index = int(assign[-1])
    return store


def adaptation_converged(prev_vertices, new_vertices, tol_mm_sq=1.0):
    """True when the mean squared vertex displacement falls below tolerance."""
    prev = np.asarray(prev_vertices, dtype=np.float64)
    new = np.asarray(new_vertices, dtype=np.float64)
    if prev.shape != new.shape:
        raise ValueError("vertex arrays must have the same shape")
    mse = float(np.mean(np.sum((new - prev) ** 2, axis=-1)))
    return mse < tol_mm_sq


@dataclass
class IdentitySolveContext:
    """Pose-independent pieces of the per-frame identity solve.

    Everything is taken at the face model's prior hyper-parameters so the
    estimates feeding the switch rule stay unbiased by whoever is currently
    being tracked.
    """

    mean3: np.ndarray  # (N, 3)
    p_id3: np.ndarray  # (N, 3, d_id)
    blocks_exp: np.ndarray = field(repr=False)  # (N, 3, 3)
    prior_mean: np.ndarray = None
    prior_prec: np.ndarray = field(default=None, repr=False)

    @staticmethod
    def from_model(model):
        n = model.n_vertices
        p_id = model.core @ model.mu_exp
        p_exp = np.einsum("iab,a->ib", model.core, model.mu_id, optimize=True)
        p3 = p_exp.reshape(n, 3, -1)
        blocks = np.einsum(
            "nik,kl,njl->nij", p3, model.sigma_exp, p3, optimize=True
        )
        prec = np.linalg.inv(model.sigma_id + COV_REG * np.eye(model.dims[0]))
        return IdentitySolveContext(
            mean3=model.mean.reshape(n, 3),
            p_id3=p_id.reshape(n, 3, -1),
            blocks_exp=blocks,
            prior_mean=model.mu_id.copy(),
            prior_prec=prec,
        )


def estimate_wid(rays, labels, pose, model, params, context=None):
    """Identity weights explaining the visible rays at a fixed pose.

    Minimizes plane-distance residuals weighted by inverse projected variance
    plus full 3-d point residuals weighted by the inverse warped expression
    covariance (regularized by the sensor noise), under the Gaussian identity
    prior. Returns (w_id, reliable); ``reliable`` is False below the visible
    ray floor, and with no visible rays at all the prior mean comes back.
    """
    from .geometry import rotation_matrix

    if context is None:
        context = IdentitySolveContext.from_model(model)
    vis = np.asarray(labels) == VISIBLE
    n_vis = int(vis.sum())
    if n_vis == 0:
        return context.prior_mean.copy(), False

    R = rotation_matrix(pose.omega)
    s = np.exp(pose.alpha)
    n = rays.normals[vis]
    p = rays.points[vis]
    B = s * np.einsum("ij,njp->nip", R, context.p_id3[vis], optimize=True)
    r = s * (context.mean3[vis] @ R.T) + pose.t - p

    blocks_w = s**2 * np.einsum(
        "ij,njk,lk->nil", R, context.blocks_exp[vis], R, optimize=True
    )
    W = np.linalg.inv(blocks_w + params.sigma_o_sq * np.eye(3))
    s_e2 = params.sigma_o_sq + np.einsum(
        "ni,nij,nj->n", n, blocks_w, n, optimize=True
    )

    a = np.einsum("nip,ni->np", B, n)
    plane_r = np.einsum("ni,ni->n", n, r)
    A = (
        (a / s_e2[:, None]).T @ a
        + np.einsum("nip,nij,njq->pq", B, W, B, optimize=True)
        + context.prior_prec
    )
    b = (
        -(a.T @ (plane_r / s_e2))
        - np.einsum("nip,nij,nj->p", B, W, r, optimize=True)
        + context.prior_prec @ context.prior_mean
    )
    w = np.linalg.solve(A, b)
    return w, n_vis >= MIN_VISIBLE_RAYS
