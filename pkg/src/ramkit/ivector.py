"""The four-step i-vector pipeline: UBM, statistics, extractor EM, extraction.

The total-variability model treats the GMM mean supervector of a speaker
as ``m + T w`` with a standard-normal latent ``w`` of dimension K.  Given
zero-order counts n_c and centered first-order sums f_c against the UBM,
the posterior of w is Gaussian with precision ``L = I + sum_c n_c T_c'
Sigma_c^-1 T_c`` and mean ``w_bar = L^-1 T' Sigma^-1 f``; extraction
returns that posterior mean.  Extractor training alternates the E-step
above (plus second moments L^-1 + w_bar w_bar') with per-component
least-squares updates ``T_c = B_c A_c^-1`` where ``A_c = sum_s n_sc
E[w w']_s`` and ``B_c = sum_s f_sc w_bar_s'``.  The tracked objective is
the data-dependent part of the exact marginal log-likelihood,
``sum_s 0.5 (b_s . w_bar_s) - 0.5 logdet L_s``, which EM never decreases.

Statistics here are accumulated with BLAS matrix products over the frame
axis (not the fixed-order `matmul` kernel): contracting over tens of
thousands of frames with the ordered strategy would be quadratic in
overhead.  Results remain deterministic for fixed inputs on one machine.

Long utterances are saturated: when a statistics object holds more than
`max_count` frames of posterior mass, the whole object is scaled down to
exactly `max_count`, which caps how far an i-vector can drift from the
prior.  The default of 600 frames is a package choice.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import DTYPE, matmul, read_matrix, require, write_matrix

UBM_MAGIC = b"RAM-UBM1"
EXTRACTOR_MAGIC = b"RAM-TVE1"

DEFAULT_MAX_COUNT = 600
DEFAULT_CHUNK = 30


@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture."""
    weights: np.ndarray     # (C,)
    means: np.ndarray       # (C, D)
    variances: np.ndarray   # (C, D), floored positive

    @property
    def num_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass
class BwStats:
    """Zero-order and centered first-order statistics per component."""
    n: np.ndarray   # (C,)
    f: np.ndarray   # (C, D)

    def __add__(self, other):
        return BwStats(self.n + other.n, self.f + other.f)

    def scaled(self, factor):
        return BwStats(self.n * factor, self.f * factor)

    def copy(self):
        return BwStats(self.n.copy(), self.f.copy())

    @property
    def total_count(self):
        return float(self.n.sum())


@dataclass
class IVectorExtractor:
    ubm: GmmModel
    t_matrix: np.ndarray    # (C, D, K)

    @property
    def ivector_dim(self):
        return self.t_matrix.shape[2]


def zero_stats(num_components, dim):
    return BwStats(np.zeros(num_components, dtype=DTYPE),
                   np.zeros((num_components, dim), dtype=DTYPE))


def _log_component_likelihoods(gmm, frames):
    """(N, C) matrix of log w_c + log N(x | mu_c, diag sigma_c)."""
    frames = np.asarray(frames, dtype=DTYPE)
    inv_var = 1.0 / gmm.variances
    # expand (x - mu)^2 / var into three frame-axis products (BLAS)
    sq = np.dot(frames ** 2, inv_var.T)
    cross = np.dot(frames, (gmm.means * inv_var).T)
    const = (gmm.means ** 2 * inv_var).sum(axis=1)
    log_det = np.log(gmm.variances).sum(axis=1)
    d = gmm.dim
    quad = sq - 2.0 * cross + const
    return (np.log(np.maximum(gmm.weights, 1e-300))
            - 0.5 * (d * np.log(2.0 * np.pi) + log_det + quad))


def gmm_log_likelihood(gmm, frames):
    """Total log-likelihood of the frames under the mixture."""
    lc = _log_component_likelihoods(gmm, frames)
    m = lc.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(lc - m).sum(axis=1))).sum())


def gmm_posteriors(gmm, frames):
    """(N, C) posterior component responsibilities."""
    lc = _log_component_likelihoods(gmm, frames)
    m = lc.max(axis=1, keepdims=True)
    e = np.exp(lc - m)
    return e / e.sum(axis=1, keepdims=True)


def train_ubm(frames, num_components, iterations=10, rng=None,
              variance_floor_frac=1e-4, kmeans_iters=2, ll_trace=None):
    """EM for a diagonal GMM from a seeded k-means-style start.

    Variances are floored at `variance_floor_frac` of the global variance.
    If `ll_trace` is a list, the total log-likelihood at the start of each
    EM iteration is appended; the sequence is nondecreasing.
    """
    frames = np.asarray(frames, dtype=DTYPE)
    require(frames.ndim == 2 and frames.shape[0] > 0, "need a nonempty (N, D) frame matrix")
    n_frames, dim = frames.shape
    require(num_components >= 1, "need at least one component")
    require(n_frames >= num_components,
            f"cannot fit {num_components} components to {n_frames} frames")
    global_var = frames.var(axis=0)
    floor = np.maximum(variance_floor_frac * global_var, 1e-10)

    idx = rng.choice(n_frames, num_components, replace=False)
    means = frames[np.sort(idx)].copy()
    for _ in range(kmeans_iters):
        assign = _chunked_sqdist(frames, means).argmin(axis=1)
        for c in range(num_components):
            sel = assign == c
            if sel.any():
                means[c] = frames[sel].mean(axis=0)
    assign = _chunked_sqdist(frames, means).argmin(axis=1)
    variances = np.empty((num_components, dim), dtype=DTYPE)
    weights = np.empty(num_components, dtype=DTYPE)
    for c in range(num_components):
        sel = assign == c
        count = int(sel.sum())
        weights[c] = max(count, 1) / n_frames
        variances[c] = frames[sel].var(axis=0) if count > 1 else global_var
    variances = np.maximum(variances, floor)
    weights = weights / weights.sum()
    gmm = GmmModel(weights=weights, means=means, variances=variances)

    for _ in range(iterations):
        lc = _log_component_likelihoods(gmm, frames)
        m = lc.max(axis=1, keepdims=True)
        e = np.exp(lc - m)
        denom = e.sum(axis=1, keepdims=True)
        if ll_trace is not None:
            ll_trace.append(float((m[:, 0] + np.log(denom[:, 0])).sum()))
        gamma = e / denom
        counts = gamma.sum(axis=0)
        new_means = gmm.means.copy()
        new_vars = gmm.variances.copy()
        new_weights = gmm.weights.copy()
        active = counts > 1e-8
        first = np.dot(gamma.T, frames)
        second = np.dot(gamma.T, frames ** 2)
        new_means[active] = first[active] / counts[active, None]
        new_vars[active] = np.maximum(
            second[active] / counts[active, None] - new_means[active] ** 2, floor)
        new_weights = counts / n_frames
        new_weights = np.maximum(new_weights, 1e-10)
        new_weights = new_weights / new_weights.sum()
        gmm = GmmModel(weights=new_weights, means=new_means, variances=new_vars)
    return gmm


def _chunked_sqdist(frames, means, chunk=4096):
    out = np.empty((frames.shape[0], means.shape[0]), dtype=DTYPE)
    for start in range(0, frames.shape[0], chunk):
        block = frames[start:start + chunk]
        out[start:start + chunk] = ((block[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return out


def accumulate_stats(ubm, frames):
    """Zero-order and centered first-order statistics against the UBM."""
    frames = np.asarray(frames, dtype=DTYPE)
    require(frames.ndim == 2 and frames.shape[1] == ubm.dim,
            f"frame dim {frames.shape} does not match UBM dim {ubm.dim}")
    gamma = gmm_posteriors(ubm, frames)
    n = gamma.sum(axis=0)
    f = np.dot(gamma.T, frames) - n[:, None] * ubm.means
    return BwStats(n=n, f=f)


def saturate_stats(stats, max_count):
    """Scale the statistics down so the total count is at most max_count.

    The threshold carries a relative tolerance of a few ulp so that an
    already-saturated object passes through unchanged (idempotence)."""
    require(max_count > 0, "max_count must be positive")
    total = stats.total_count
    if total > max_count * (1.0 + 1e-12):
        return stats.scaled(max_count / total)
    return stats.copy()


def _posterior_moments(extractor, stats):
    """Posterior precision L, mean w_bar, and the linear term b."""
    t = extractor.t_matrix
    inv_var = 1.0 / extractor.ubm.variances           # (C, D)
    k = extractor.ivector_dim
    t_sig = t * inv_var[:, :, None]                   # (C, D, K)
    # M_c = T_c' Sigma_c^-1 T_c, contracted over the small feature axis
    m_blocks = np.einsum("cdk,cdl->ckl", t, t_sig)
    L = np.eye(k, dtype=DTYPE) + np.tensordot(stats.n, m_blocks, axes=(0, 0))
    b = np.einsum("cdk,cd->k", t_sig, stats.f)
    w_bar = np.linalg.solve(L, b)
    return L, w_bar, b


def extract_ivector(extractor, stats):
    """Posterior mean of the latent factor for one statistics object."""
    require(stats.f.shape == (extractor.ubm.num_components, extractor.ubm.dim),
            "statistics shape does not match the extractor's UBM")
    _, w_bar, _ = _posterior_moments(extractor, stats)
    return w_bar


def train_extractor(ubm, stats_list, ivector_dim, iterations=5, rng=None, ll_trace=None):
    """EM for the total-variability matrix from per-speaker statistics.

    If `ll_trace` is a list, the marginal-likelihood term for each
    iteration's E-step is appended (nondecreasing under EM).
    """
    require(len(stats_list) > 0, "need at least one statistics object")
    require(ivector_dim >= 1, "i-vector dimension must be >= 1")
    c, d = ubm.num_components, ubm.dim
    require(ivector_dim <= c * d, "i-vector dimension exceeds supervector dimension")
    total_mass = sum(s.total_count for s in stats_list)
    require(total_mass > 0, "all statistics are empty; nothing to train on")

    scale = np.sqrt(ubm.variances)
    t = rng.normal(size=(c, d, ivector_dim)) * scale[:, :, None] * 0.1
    extractor = IVectorExtractor(ubm=ubm, t_matrix=t.astype(DTYPE))
    inv_var = 1.0 / ubm.variances

    for _ in range(iterations):
        a_acc = np.zeros((c, ivector_dim, ivector_dim), dtype=DTYPE)
        b_acc = np.zeros((c, d, ivector_dim), dtype=DTYPE)
        objective = 0.0
        for stats in stats_list:
            L, w_bar, b = _posterior_moments(extractor, stats)
            cov = np.linalg.inv(L)
            eww = cov + np.outer(w_bar, w_bar)
            sign, logdet = np.linalg.slogdet(L)
            objective += 0.5 * float(b @ w_bar) - 0.5 * float(logdet)
            a_acc += stats.n[:, None, None] * eww[None, :, :]
            b_acc += stats.f[:, :, None] * w_bar[None, None, :]
        if ll_trace is not None:
            ll_trace.append(objective)
        new_t = extractor.t_matrix.copy()
        for comp in range(c):
            if a_acc[comp].trace() <= 1e-12:
                continue
            new_t[comp] = np.linalg.solve(a_acc[comp], b_acc[comp].T).T
        extractor = IVectorExtractor(ubm=ubm, t_matrix=new_t)
    return extractor


def extract_online(extractor, frames, chunk=DEFAULT_CHUNK, max_count=DEFAULT_MAX_COUNT):
    """Streamed extraction: accumulate statistics causally and report an
    i-vector after every chunk.  Returns (per-chunk i-vectors, final
    i-vector); the final vector equals offline extraction of the saturated
    full-stream statistics."""
    frames = np.asarray(frames, dtype=DTYPE)
    require(frames.shape[0] > 0, "empty utterance")
    require(chunk >= 1, "chunk size must be >= 1")
    running = zero_stats(extractor.ubm.num_components, extractor.ubm.dim)
    per_chunk = []
    for start in range(0, frames.shape[0], chunk):
        running = running + accumulate_stats(extractor.ubm, frames[start:start + chunk])
        per_chunk.append(extract_ivector(extractor, saturate_stats(running, max_count)))
    return per_chunk, per_chunk[-1]


def make_pseudo_speakers(utterances):
    """Pair up each true speaker's utterances in manifest order; an odd
    utterance forms a singleton group.  Groups never cross speakers."""
    by_speaker = {}
    for u in utterances:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    groups = []
    for speaker_id, utts in by_speaker.items():
        for k in range(0, len(utts), 2):
            pair = utts[k:k + 2]
            groups.append((f"{speaker_id}#p{k // 2}", pair))
    return groups


def _write_gmm_block(fh, gmm):
    fh.write(UBM_MAGIC)
    fh.write(struct.pack("<II", gmm.num_components, gmm.dim))
    write_matrix(fh, gmm.weights[None, :])
    write_matrix(fh, gmm.means)
    write_matrix(fh, gmm.variances)


def _read_gmm_block(fh):
    magic = fh.read(len(UBM_MAGIC))
    require(magic == UBM_MAGIC, f"bad UBM magic {magic!r}")
    c, d = struct.unpack("<II", fh.read(8))
    weights = read_matrix(fh)[0]
    means = read_matrix(fh)
    variances = read_matrix(fh)
    require(weights.shape == (c,) and means.shape == (c, d), "inconsistent UBM file")
    return GmmModel(weights=weights, means=means, variances=variances)


def save_gmm(path, gmm):
    with open(path, "wb") as fh:
        _write_gmm_block(fh, gmm)


def load_gmm(path):
    with open(path, "rb") as fh:
        return _read_gmm_block(fh)


def save_extractor(path, extractor):
    c, d, k = extractor.t_matrix.shape
    with open(path, "wb") as fh:
        fh.write(EXTRACTOR_MAGIC)
        fh.write(struct.pack("<III", c, d, k))
        write_matrix(fh, extractor.t_matrix.reshape(c * d, k))
        _write_gmm_block(fh, extractor.ubm)


def load_extractor(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(EXTRACTOR_MAGIC))
        require(magic == EXTRACTOR_MAGIC, f"bad extractor magic {magic!r}")
        c, d, k = struct.unpack("<III", fh.read(12))
        t = read_matrix(fh).reshape(c, d, k)
        ubm = _read_gmm_block(fh)
        return IVectorExtractor(ubm=ubm, t_matrix=t)
