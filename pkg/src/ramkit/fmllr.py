"""Feature-space MLLR: per-speaker affine transforms against a GMM.

A transform maps every frame x to A x + b.  Estimation maximizes the
auxiliary

    Q(A, b) = beta * log|det A| - 0.5 * sum_t sum_c gamma_t(c) *
              || Sigma_c^{-1/2} (A x_t + b - mu_c) ||^2

over the adaptation data, with beta the total posterior occupancy.  With
W = [A | b] and extended frames xe = [x; 1] the data enter only through

    G_i = sum_c sigma_{c,i}^{-2} sum_t gamma_t(c) xe xe'
    k_i = sum_c mu_{c,i} sigma_{c,i}^{-2} sum_t gamma_t(c) xe'

and each row w_i of W has a closed-form update: with p the cofactor row
of A (extended by a zero for the bias column), the optimum is
w_i = G_i^{-1} (alpha p + k_i) where alpha solves the quadratic
alpha^2 (p'G^-1 p) + alpha (p'G^-1 k) - beta = 0; of the two roots the
one with the larger Q wins.  Q never decreases over row updates.

Frame-axis accumulation uses BLAS products (see the i-vector module for
the same tradeoff).  Speaker-adaptive refinement is reduced to a small
number of alternations between transform estimation and GMM
re-estimation on the transformed data; the default is 2 alternations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ivector import GmmModel, gmm_posteriors, train_ubm
from .numerics import DTYPE, matmul, read_matrix, require, write_matrix

FMLLR_MAGIC = b"RAM-FMLLR"
FMLLR_SET_MAGIC = b"RAM-FMLSET"


@dataclass
class FmllrTransform:
    a: np.ndarray   # (D, D)
    b: np.ndarray   # (D,)

    @property
    def dim(self):
        return self.b.shape[0]


def identity_transform(dim):
    return FmllrTransform(a=np.eye(dim, dtype=DTYPE), b=np.zeros(dim, dtype=DTYPE))


def _accumulate(gmm, frames, posteriors):
    """Occupancy beta, per-row quadratic accumulators G (D, D+1, D+1), and
    linear accumulators k (D, D+1)."""
    n_frames, dim = frames.shape
    xe = np.concatenate([frames, np.ones((n_frames, 1), dtype=DTYPE)], axis=1)
    inv_var = 1.0 / gmm.variances                                  # (C, D)
    beta = float(posteriors.sum())
    # S_c = sum_t gamma_t(c) xe xe' accumulated per component (BLAS)
    s_blocks = np.empty((gmm.num_components, dim + 1, dim + 1), dtype=DTYPE)
    m_blocks = np.dot(posteriors.T, xe)                            # (C, D+1)
    for c in range(gmm.num_components):
        s_blocks[c] = np.dot(xe.T * posteriors[:, c], xe)
    g = np.einsum("ci,cjk->ijk", inv_var, s_blocks)
    k = np.einsum("ci,cj->ij", gmm.means * inv_var, m_blocks)
    return beta, g, k


def _auxiliary(w, beta, g, k):
    a = w[:, :-1]
    det = np.linalg.det(a)
    quad = sum(float(w[i] @ g[i] @ w[i]) for i in range(w.shape[0]))
    lin = float((w * k).sum())
    return beta * np.log(max(abs(det), 1e-300)) - 0.5 * quad + lin


def estimate_fmllr(gmm, frames, posteriors, iterations=10, q_trace=None):
    """Estimate a maximum-likelihood affine transform for one speaker.

    `posteriors` is either an (N, C) responsibility matrix or an (N,)
    integer alignment (converted to one-hot).  If `q_trace` is a list the
    auxiliary value after every row update is appended.
    """
    frames = np.asarray(frames, dtype=DTYPE)
    dim = gmm.dim
    require(frames.ndim == 2 and frames.shape[1] == dim,
            f"frame dim {frames.shape} does not match GMM dim {dim}")
    posteriors = np.asarray(posteriors)
    if posteriors.ndim == 1:
        hard = posteriors.astype(np.intp)
        require(bool(np.all((hard >= 0) & (hard < gmm.num_components))),
                "alignment component out of range")
        onehot = np.zeros((len(hard), gmm.num_components), dtype=DTYPE)
        onehot[np.arange(len(hard)), hard] = 1.0
        posteriors = onehot
    require(posteriors.shape == (frames.shape[0], gmm.num_components),
            "posterior matrix shape mismatch")
    beta, g, k = _accumulate(gmm, frames, posteriors)
    require(beta > dim, f"insufficient occupancy ({beta:.1f}) for dimension {dim}")

    w = np.concatenate([np.eye(dim, dtype=DTYPE), np.zeros((dim, 1), dtype=DTYPE)], axis=1)
    g_inv_k = [np.linalg.solve(g[i], k[i]) for i in range(dim)]
    for _ in range(iterations):
        for i in range(dim):
            a = w[:, :dim]
            det = np.linalg.det(a)
            require(abs(det) > 1e-300, "transform collapsed to a singular matrix")
            cof_row = det * np.linalg.inv(a).T[i]
            p = np.concatenate([cof_row, [0.0]])
            g_inv_p = np.linalg.solve(g[i], p)
            pgp = float(p @ g_inv_p)
            pgk = float(p @ g_inv_k[i])
            # alpha^2 * pgp + alpha * pgk - beta = 0; the "+" root keeps the
            # determinant positive, the "-" root flips its sign.  Some data
            # make the two exactly tie (a reflection symmetry), so prefer
            # the sign-preserving root unless the other is genuinely better.
            disc = np.sqrt(pgk * pgk + 4.0 * pgp * beta)
            rows = [alpha * g_inv_p + g_inv_k[i]
                    for alpha in ((-pgk + disc) / (2.0 * pgp),
                                  (-pgk - disc) / (2.0 * pgp))]
            qs = []
            for row in rows:
                w_try = w.copy()
                w_try[i] = row
                qs.append(_auxiliary(w_try, beta, g, k))
            pick = 1 if qs[1] > qs[0] + 1e-9 * max(1.0, abs(qs[0])) else 0
            w[i] = rows[pick]
            if q_trace is not None:
                q_trace.append(qs[pick])
    a = w[:, :dim].copy()
    b = w[:, dim].copy()
    require(abs(np.linalg.det(a)) > 1e-12, "estimated transform is singular")
    return FmllrTransform(a=a, b=b)


def apply_fmllr(transform, frames):
    """Map every frame x to A x + b."""
    frames = np.asarray(frames, dtype=DTYPE)
    require(frames.ndim == 2 and frames.shape[1] == transform.dim,
            f"frame dim {frames.shape} does not match transform dim {transform.dim}")
    return matmul(frames, transform.a.T) + transform.b


def compose(second, first):
    """The transform equivalent to applying `first` then `second`."""
    a = matmul(second.a, first.a)
    b = matmul(second.a, first.b[:, None])[:, 0] + second.b
    return FmllrTransform(a=a, b=b)


def estimate_for_groups(gmm, groups, align_gmm=None, iterations=10):
    """Per-group transforms from unsupervised posteriors.

    `groups` maps a key (speaker or utterance id) to a frame matrix.  The
    alignment model defaults to the adaptation GMM itself.
    """
    align_gmm = align_gmm or gmm
    transforms = {}
    for key in sorted(groups):
        frames = groups[key]
        posteriors = gmm_posteriors(align_gmm, frames)
        transforms[key] = estimate_fmllr(gmm, frames, posteriors, iterations)
    return transforms


def two_pass_adapt(align_gmm, gmm, utterances, scope="speaker", iterations=10):
    """Unsupervised two-pass adaptation of test utterances.

    Pass 1 computes per-frame posteriors with the alignment model; pass 2
    estimates one transform per scope group and applies it.  Returns
    (adapted utterances, transforms keyed by group).
    """
    require(scope in ("speaker", "utterance"), f"unknown adaptation scope {scope!r}")
    groups = {}
    for u in utterances:
        key = u.speaker_id if scope == "speaker" else u.utt_id
        groups.setdefault(key, []).append(u)
    frame_groups = {key: np.concatenate([u.frames for u in utts], axis=0)
                    for key, utts in groups.items()}
    transforms = estimate_for_groups(gmm, frame_groups, align_gmm, iterations)
    adapted = []
    for u in utterances:
        key = u.speaker_id if scope == "speaker" else u.utt_id
        adapted.append(u.with_frames(apply_fmllr(transforms[key], u.frames)))
    return adapted, transforms


def sat_refine(utterances, num_components, rng, alternations=2, scope="speaker",
               gmm_iterations=8, fmllr_iterations=10):
    """Speaker-adaptive refinement against a GMM.

    Alternates (estimate per-group transforms, re-train the GMM on the
    transformed data).  Returns the final canonical GMM; test data is then
    adapted to it with :func:`two_pass_adapt`.
    """
    frames_all = np.concatenate([u.frames for u in utterances], axis=0)
    gmm = train_ubm(frames_all, num_components, rng=rng.child("sat-gmm", 0))
    current = list(utterances)
    for round_no in range(alternations):
        current, _ = two_pass_adapt(gmm, gmm, utterances, scope, fmllr_iterations)
        frames_all = np.concatenate([u.frames for u in current], axis=0)
        gmm = train_ubm(frames_all, num_components, rng=rng.child("sat-gmm", round_no + 1))
    return gmm


def _write_transform_block(fh, transform):
    fh.write(FMLLR_MAGIC)
    fh.write(struct.pack("<I", transform.dim))
    write_matrix(fh, transform.a)
    write_matrix(fh, transform.b[None, :])


def _read_transform_block(fh):
    magic = fh.read(len(FMLLR_MAGIC))
    require(magic == FMLLR_MAGIC, f"bad fMLLR magic {magic!r}")
    (dim,) = struct.unpack("<I", fh.read(4))
    a = read_matrix(fh)
    b = read_matrix(fh)[0]
    require(a.shape == (dim, dim) and b.shape == (dim,), "inconsistent fMLLR file")
    return FmllrTransform(a=a, b=b)


def save_transform(path, transform):
    with open(path, "wb") as fh:
        _write_transform_block(fh, transform)


def load_transform(path):
    with open(path, "rb") as fh:
        return _read_transform_block(fh)


def save_transform_set(path, transforms):
    """Keyed container: magic, u32 count, then per record a u32 key length,
    the utf-8 key, and a single-transform block."""
    with open(path, "wb") as fh:
        fh.write(FMLLR_SET_MAGIC)
        fh.write(struct.pack("<I", len(transforms)))
        for key in sorted(transforms):
            raw = key.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            _write_transform_block(fh, transforms[key])


def load_transform_set(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(FMLLR_SET_MAGIC))
        require(magic == FMLLR_SET_MAGIC, f"bad fMLLR set magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (key_len,) = struct.unpack("<I", fh.read(4))
            key = fh.read(key_len).decode()
            out[key] = _read_transform_block(fh)
        return out
