"""Statistical multilinear face model and its Gaussian marginalizations.

The model stores a mean shape plus a core tensor obtained from a higher-order
SVD of the mean-subtracted training offsets, arranged as
``(3 * n_vertices, n_identities, n_expressions)``. A face is synthesized by
contracting the core with an identity weight vector and an expression weight
vector and adding the mean. Treating both weight vectors as Gaussian turns the
model into a per-vertex Gaussian shape distribution that downstream
registration consumes through 3x3 per-vertex covariance blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class MultilinearModel:
    """Mean + core tensor + factor matrices + Gaussian weight priors.

    mean : (3N,) mean face, vertex-major (x0, y0, z0, x1, ...)
    core : (3N, d_id, d_exp) core tensor
    u_id : (n_train_id, d_id) identity factor (orthonormal columns)
    u_exp : (n_train_exp, d_exp) expression factor
    mu_id / sigma_id : identity weight prior
    mu_exp / sigma_exp : expression weight prior
    triangles : (T, 3) int vertex indices with consistent outward winding
    """

    mean: np.ndarray
    core: np.ndarray
    u_id: np.ndarray
    u_exp: np.ndarray
    mu_id: np.ndarray
    sigma_id: np.ndarray
    mu_exp: np.ndarray
    sigma_exp: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        if self.mean.shape[0] % 3 != 0:
            raise ValueError("mean length must be a multiple of 3")
        if self.core.shape[0] != self.mean.shape[0]:
            raise ValueError("core mode-1 dimension must match mean")
        if self.core.shape[1] != self.u_id.shape[1]:
            raise ValueError("core mode-2 dimension must match u_id columns")
        if self.core.shape[2] != self.u_exp.shape[1]:
            raise ValueError("core mode-3 dimension must match u_exp columns")

    @property
    def n_vertices(self):
        return self.mean.shape[0] // 3

    @property
    def dims(self):
        """(d_id, d_exp) retained weight dimensions."""
        return self.core.shape[1], self.core.shape[2]


@dataclass
class FaceDistribution:
    """Gaussian shape distribution: per-vertex means and 3x3 covariance blocks.

    p_id / p_exp are the linear maps from weight space to stacked vertex
    offsets obtained by contracting the core with the other factor's mean.
    Only the per-vertex diagonal blocks of the full shape covariance are kept.
    """

    mu: np.ndarray  # (N, 3)
    p_id: np.ndarray  # (3N, d_id)
    p_exp: np.ndarray  # (3N, d_exp)
    blocks: np.ndarray = field(repr=False)  # (N, 3, 3)

    @property
    def n_vertices(self):
        return self.mu.shape[0]


def synthesize_face(model, w_id, w_exp):
    """Contract the core with both weight vectors; returns (N, 3) vertices."""
    w_id = np.asarray(w_id, dtype=np.float64)
    w_exp = np.asarray(w_exp, dtype=np.float64)
    d_id, d_exp = model.dims
    if w_id.shape != (d_id,):
        raise ValueError(f"w_id must have shape ({d_id},)")
    if w_exp.shape != (d_exp,):
        raise ValueError(f"w_exp must have shape ({d_exp},)")
    flat = model.mean + (model.core @ w_exp) @ w_id
    return flat.reshape(-1, 3)


def _weight_blocks(p, sigma):
    """Per-vertex 3x3 blocks of P Sigma P^T without forming the full matrix."""
    n = p.shape[0] // 3
    p3 = p.reshape(n, 3, -1)
    return np.einsum("nik,kl,njl->nij", p3, sigma, p3, optimize=True)


def marginalize(model, mu_id=None, sigma_id=None, mu_exp=None, sigma_exp=None):
    """Gaussian shape distribution with both weight vectors marginalized out.

    The priors stored in the model are used unless overridden, which is how a
    personalized identity posterior is folded back into tracking. The
    cross-term of the bilinear form is dropped: covariance keeps only the two
    linearized contributions, evaluated at the (possibly overridden) means.
    """
    mu_id = model.mu_id if mu_id is None else np.asarray(mu_id, float)
    sigma_id = model.sigma_id if sigma_id is None else np.asarray(sigma_id, float)
    mu_exp = model.mu_exp if mu_exp is None else np.asarray(mu_exp, float)
    sigma_exp = model.sigma_exp if sigma_exp is None else np.asarray(sigma_exp, float)

    p_id = model.core @ mu_exp  # (3N, d_id)
    p_exp = np.einsum("iab,a->ib", model.core, mu_id, optimize=True)  # (3N, d_exp)
    mu = model.mean + p_id @ mu_id
    blocks = _weight_blocks(p_id, sigma_id) + _weight_blocks(p_exp, sigma_exp)
    return FaceDistribution(mu.reshape(-1, 3), p_id, p_exp, blocks)


def identity_conditioned(model, w_id, mu_exp=None, sigma_exp=None):
    """Shape distribution for a known identity: expression variance only."""
    w_id = np.asarray(w_id, dtype=np.float64)
    mu_exp = model.mu_exp if mu_exp is None else np.asarray(mu_exp, float)
    sigma_exp = model.sigma_exp if sigma_exp is None else np.asarray(sigma_exp, float)
    p_id = model.core @ mu_exp
    p_exp = np.einsum("iab,a->ib", model.core, w_id, optimize=True)
    mu = model.mean + p_id @ w_id
    blocks = _weight_blocks(p_exp, sigma_exp)
    return FaceDistribution(mu.reshape(-1, 3), p_id, p_exp, blocks)


def estimate_hyperparameters(model):
    """Weight priors implied by orthonormal factors over one-hot training data.

    Each training sample's weight vector is one row of the factor matrix, so
    the prior mean is the column average of U and the covariance is taken
    isotropic at 1/d for the d columns kept (identity over the retained
    dimensions, scaled by the inverse dimension).
    """
    n_id, d_id = model.u_id.shape
    n_exp, d_exp = model.u_exp.shape
    mu_id = model.u_id.sum(axis=0) / n_id
    mu_exp = model.u_exp.sum(axis=0) / n_exp
    sigma_id = np.eye(d_id) / d_id
    sigma_exp = np.eye(d_exp) / d_exp
    return replace(
        model, mu_id=mu_id, sigma_id=sigma_id, mu_exp=mu_exp, sigma_exp=sigma_exp
    )


def build_from_corpus(meshes, triangles):
    """Fit the multilinear model to a fully crossed identity x expression corpus.

    Parameters
    ----------
    meshes : (n_id, n_exp, N, 3) array
        One registered mesh per identity/expression combination.
    triangles : (T, 3) int array

    Returns
    -------
    MultilinearModel at full rank with hyper-parameters estimated.
    """
    meshes = np.asarray(meshes, dtype=np.float64)
    if meshes.ndim != 4 or meshes.shape[3] != 3:
        raise ValueError("corpus must have shape (n_id, n_exp, N, 3)")
    n_id, n_exp, n_vert, _ = meshes.shape
    flat = meshes.reshape(n_id, n_exp, 3 * n_vert)
    mean = flat.mean(axis=(0, 1))
    offsets = (flat - mean).transpose(2, 0, 1)  # (3N, n_id, n_exp)

    # Mode-2 and mode-3 unfoldings; rows indexed by the unfolded mode.
    unfold_id = offsets.transpose(1, 0, 2).reshape(n_id, -1)
    unfold_exp = offsets.transpose(2, 0, 1).reshape(n_exp, -1)
    u_id, _, _ = np.linalg.svd(unfold_id, full_matrices=False)
    u_exp, _, _ = np.linalg.svd(unfold_exp, full_matrices=False)

    core = np.einsum("ijk,ja,kb->iab", offsets, u_id, u_exp, optimize=True)
    model = MultilinearModel(
        mean=mean,
        core=core,
        u_id=u_id,
        u_exp=u_exp,
        mu_id=np.zeros(u_id.shape[1]),
        sigma_id=np.eye(u_id.shape[1]),
        mu_exp=np.zeros(u_exp.shape[1]),
        sigma_exp=np.eye(u_exp.shape[1]),
        triangles=np.asarray(triangles, dtype=np.int64),
    )
    return estimate_hyperparameters(model)


def training_weights(model):
    """Per-sample weight vectors of the training corpus: rows of the factors."""
    return model.u_id.copy(), model.u_exp.copy()


def truncate(model, d_id, d_exp):
    """Keep the leading d_id / d_exp weight dimensions; re-estimate priors.

    Factor columns come out of the SVD ordered by singular value, so slicing
    keeps the dominant variation.
    """
    full_id, full_exp = model.dims
    if not (1 <= d_id <= full_id) or not (1 <= d_exp <= full_exp):
        raise ValueError("truncation dimensions out of range")
    cut = replace(
        model,
        core=np.ascontiguousarray(model.core[:, :d_id, :d_exp]),
        u_id=np.ascontiguousarray(model.u_id[:, :d_id]),
        u_exp=np.ascontiguousarray(model.u_exp[:, :d_exp]),
        mu_id=model.mu_id[:d_id],
        sigma_id=np.eye(d_id),
        mu_exp=model.mu_exp[:d_exp],
        sigma_exp=np.eye(d_exp),
    )
    return estimate_hyperparameters(cut)
