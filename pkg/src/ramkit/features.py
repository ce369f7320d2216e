"""Feature ingestion, cepstral mean normalization, i-vector concatenation.

Corpus directory layout: a `corpus.tsv` manifest with one row per
utterance and five tab-separated columns::

    utt_id  speaker_id  feats/<utt>.mat  labels/<utt>.lab|-  transcript|-

Feature files use the "RAM1" matrix format (frames as rows), label files
are newline-delimited integer state ids, and the transcript column holds
space-delimited phone symbols ("-" when absent).

Online CMN is strictly causal: frame t is normalized by the running mean
of frames 0..t-1 (seeded with the global mean), so a frame never feeds
its own normalizer.  The running mean either blends the global prior
with the observed sum (prior weight `prior_frames`, default 100) or,
with a forgetting factor, decays exponentially.  Defaults are package
choices; upstream practice leaves them open.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DTYPE, read_matrix, require, write_matrix


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    frames: np.ndarray                       # (T, dim)
    labels: np.ndarray | None = None         # (T,) int state ids
    transcript: list[str] | None = None

    def with_frames(self, frames):
        return Utterance(self.utt_id, self.speaker_id, np.asarray(frames, dtype=DTYPE),
                         self.labels, self.transcript)


@dataclass
class CmnConfig:
    mode: str = "offline_per_speaker"   # none | offline_per_utterance | offline_per_speaker | online
    global_mean: np.ndarray | None = None
    prior_frames: int = 100
    forgetting: float | None = None     # in (0, 1]; None disables
    normalize_variance: bool = False


def global_mean_of(utterances):
    frames = np.concatenate([u.frames for u in utterances], axis=0)
    return frames.mean(axis=0)


def cmn_offline(utterances, scope="speaker", normalize_variance=False):
    """Subtract the mean over the scope group (utterance or speaker) from
    every frame in the group; optionally also divide by the group stddev."""
    require(scope in ("speaker", "utterance"), f"unknown CMN scope {scope!r}")
    require(len(utterances) > 0, "no utterances to normalize")
    out = []
    if scope == "utterance":
        groups = [[u] for u in utterances]
    else:
        by_speaker = {}
        for u in utterances:
            by_speaker.setdefault(u.speaker_id, []).append(u)
        groups = list(by_speaker.values())
    for group in groups:
        frames = np.concatenate([u.frames for u in group], axis=0)
        require(frames.shape[0] > 0, "empty normalization group")
        mean = frames.mean(axis=0)
        if normalize_variance:
            std = frames.std(axis=0)
            std = np.where(std > 1e-10, std, 1.0)
        for u in group:
            normalized = u.frames - mean
            if normalize_variance:
                normalized = normalized / std
            out.append(u.with_frames(normalized))
    order = {u.utt_id: k for k, u in enumerate(utterances)}
    out.sort(key=lambda u: order[u.utt_id])
    return out


def cmn_online(utterance, config):
    """Causal running-mean normalization of one utterance."""
    require(config.mode == "online", "cmn_online requires an online-mode config")
    require(config.global_mean is not None, "online CMN needs a global mean")
    require(config.prior_frames >= 1, "prior_frames must be >= 1")
    frames = utterance.frames
    g = np.asarray(config.global_mean, dtype=DTYPE)
    require(g.shape == (frames.shape[1],), "global mean has wrong dimension")
    out = np.empty_like(frames)
    if config.forgetting is not None:
        alpha = config.forgetting
        require(0.0 < alpha <= 1.0, "forgetting factor must be in (0, 1]")
        mean = g.copy()
        for t in range(frames.shape[0]):
            out[t] = frames[t] - mean
            mean = (1.0 - alpha) * mean + alpha * frames[t]
    else:
        prior = float(config.prior_frames)
        total = prior * g
        count = prior
        for t in range(frames.shape[0]):
            out[t] = frames[t] - total / count
            total = total + frames[t]
            count += 1.0
    return utterance.with_frames(out)


def apply_cmn(utterances, config):
    """Dispatch over the CMN mode for a whole utterance list."""
    if config.mode == "none":
        return list(utterances)
    if config.mode == "offline_per_utterance":
        return cmn_offline(utterances, "utterance", config.normalize_variance)
    if config.mode == "offline_per_speaker":
        return cmn_offline(utterances, "speaker", config.normalize_variance)
    if config.mode == "online":
        return [cmn_online(u, config) for u in utterances]
    raise ValueError(f"unknown CMN mode {config.mode!r}")


def append_ivector(frames, ivector):
    """Concatenate the same i-vector to every frame."""
    frames = np.asarray(frames, dtype=DTYPE)
    ivector = np.asarray(ivector, dtype=DTYPE)
    require(frames.ndim == 2, "frames must be a (T, dim) matrix")
    require(ivector.ndim == 1, "i-vector must be a vector")
    tiled = np.tile(ivector, (frames.shape[0], 1))
    return np.concatenate([frames, tiled], axis=1)


def write_corpus(corpus_dir, utterances):
    corpus_dir = Path(corpus_dir)
    (corpus_dir / "feats").mkdir(parents=True, exist_ok=True)
    has_labels = any(u.labels is not None for u in utterances)
    if has_labels:
        (corpus_dir / "labels").mkdir(exist_ok=True)
    rows = []
    for u in sorted(utterances, key=lambda u: u.utt_id):
        feat_rel = f"feats/{u.utt_id}.mat"
        write_matrix(corpus_dir / feat_rel, u.frames)
        if u.labels is not None:
            label_rel = f"labels/{u.utt_id}.lab"
            (corpus_dir / label_rel).write_text(
                "\n".join(str(int(v)) for v in u.labels) + "\n")
        else:
            label_rel = "-"
        transcript = " ".join(u.transcript) if u.transcript else "-"
        rows.append(f"{u.utt_id}\t{u.speaker_id}\t{feat_rel}\t{label_rel}\t{transcript}\n")
    (corpus_dir / "corpus.tsv").write_text("".join(rows))


def read_corpus(corpus_dir):
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "corpus.tsv"
    require(manifest.exists(), f"no corpus.tsv in {corpus_dir}")
    utterances = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        require(len(parts) == 5, f"malformed manifest row: {line!r}")
        utt_id, speaker_id, feat_rel, label_rel, transcript = parts
        frames = read_matrix(corpus_dir / feat_rel)
        labels = None
        if label_rel != "-":
            labels = np.array(
                [int(v) for v in (corpus_dir / label_rel).read_text().split()],
                dtype=np.intp)
            require(len(labels) == frames.shape[0],
                    f"label count mismatch in {utt_id}")
        phones = transcript.split() if transcript != "-" else None
        utterances.append(Utterance(utt_id, speaker_id, frames, labels, phones))
    return utterances
