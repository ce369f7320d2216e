"""Bigram phone-level Viterbi decoding, phone mapping, and PER scoring.

Decoding runs over context-independent left-to-right phone HMMs (default
3 states per phone; the tied-triphone structure of a full system is out
of scope here, the bigram + Viterbi structure is kept).  Emission scores
are scaled likelihoods: log posterior(state) - log prior(state).  Phone
transitions add the bigram log-probability times `lm_weight`.

Every argmax scans states in increasing index and replaces only on a
strictly better score, so ties resolve to the lowest state (and hence
lowest phone) index and decoding is fully deterministic.

The standard 48-to-39 phone folding used for corpus scoring ships as
`data/timit_48to39.tsv`; any file with the same two-column format (a
"-" scoring symbol deletes the phone) is accepted.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DTYPE, require


@dataclass
class PhoneSet:
    """Training phone inventory plus the map onto scoring symbols.

    Network output id `p * states_per_phone + j` belongs to state j of
    phone `phones[p]`.
    """
    phones: list[str]
    states_per_phone: int = 3
    scoring_map: dict[str, str | None] | None = None   # None value deletes

    @property
    def num_states(self):
        return len(self.phones) * self.states_per_phone

    def phone_of_state(self, state_id):
        return self.phones[state_id // self.states_per_phone]


@dataclass
class BigramModel:
    phones: list[str]
    log_initial: np.ndarray    # (P,)
    log_transition: np.ndarray  # (P, P), rows normalized in probability space


@dataclass
class PhoneHmm:
    """Left-to-right topology shared by every phone."""
    states_per_phone: int = 3
    self_loop_prob: float = 0.5

    def __post_init__(self):
        require(self.states_per_phone >= 1, "need at least one state per phone")
        require(0.0 < self.self_loop_prob < 1.0, "self-loop probability must be in (0, 1)")

    @property
    def log_loop(self):
        return float(np.log(self.self_loop_prob))

    @property
    def log_advance(self):
        return float(np.log(1.0 - self.self_loop_prob))


def build_bigram(transcripts, phones, smoothing_floor=0.1):
    """Maximum-likelihood bigram with add-floor smoothing.

    `transcripts` is an iterable of phone-symbol sequences; every symbol
    must be in `phones`.  Initial probabilities come from first symbols.
    """
    transcripts = [list(t) for t in transcripts]
    require(len(transcripts) > 0 and any(len(t) > 0 for t in transcripts),
            "cannot build a bigram model from empty transcripts")
    require(smoothing_floor > 0.0, "smoothing floor must be positive")
    index = {p: i for i, p in enumerate(phones)}
    p_count = len(phones)
    trans = np.full((p_count, p_count), smoothing_floor, dtype=DTYPE)
    init = np.full(p_count, smoothing_floor, dtype=DTYPE)
    for t in transcripts:
        for sym in t:
            require(sym in index, f"transcript symbol {sym!r} not in phone set")
        if t:
            init[index[t[0]]] += 1.0
        for a, b in zip(t, t[1:]):
            trans[index[a], index[b]] += 1.0
    trans /= trans.sum(axis=1, keepdims=True)
    init /= init.sum()
    return BigramModel(phones=list(phones), log_initial=np.log(init),
                       log_transition=np.log(trans))


def estimate_priors(utterances, num_states, floor=0.5):
    """State priors from training label counts with add-floor smoothing."""
    counts = np.full(num_states, floor, dtype=DTYPE)
    for u in utterances:
        require(u.labels is not None, f"utterance {u.utt_id} has no labels")
        np.add.at(counts, np.asarray(u.labels, dtype=np.intp), 1.0)
    return counts / counts.sum()


def _transition_tables(phoneset, bigram, hmm, lm_weight):
    """Dense log transition matrix over all phone states and a parallel
    boolean table marking edges that start a new phone occurrence."""
    p_count = len(phoneset.phones)
    s = hmm.states_per_phone
    n = p_count * s
    trans = np.full((n, n), -np.inf, dtype=DTYPE)
    entry = np.zeros((n, n), dtype=bool)
    for p in range(p_count):
        for j in range(s):
            sid = p * s + j
            trans[sid, sid] = hmm.log_loop
            if j + 1 < s:
                trans[sid, sid + 1] = hmm.log_advance
    for p in range(p_count):
        exit_id = p * s + (s - 1)
        for q in range(p_count):
            enter_id = q * s
            score = hmm.log_advance + lm_weight * bigram.log_transition[p, q]
            # with a single state per phone the self-loop competes with
            # re-entering the same phone; the self-loop wins ties
            if score > trans[exit_id, enter_id]:
                trans[exit_id, enter_id] = score
                entry[exit_id, enter_id] = True
    return trans, entry


def viterbi_decode(posteriors, priors, bigram, hmm, phoneset, lm_weight=1.0):
    """Best phone sequence under scaled likelihoods, the phone HMM
    topology, and weighted bigram transitions."""
    posteriors = np.asarray(posteriors, dtype=DTYPE)
    priors = np.asarray(priors, dtype=DTYPE)
    n = phoneset.num_states
    require(posteriors.ndim == 2 and posteriors.shape[1] == n,
            f"posterior shape {posteriors.shape} does not match {n} states")
    require(bool(np.all(np.abs(posteriors.sum(axis=1) - 1.0) < 1e-6)),
            "posterior rows must sum to 1")
    require(priors.shape == (n,) and bool(np.all(priors > 0)), "priors must be positive")
    require(hmm.states_per_phone == phoneset.states_per_phone,
            "HMM and phone set disagree on states per phone")
    T = posteriors.shape[0]
    s = hmm.states_per_phone
    with np.errstate(divide="ignore"):
        emission = np.log(posteriors) - np.log(priors)[None, :]
    trans, entry = _transition_tables(phoneset, bigram, hmm, lm_weight)

    delta = np.full(n, -np.inf, dtype=DTYPE)
    entry_states = np.arange(len(phoneset.phones)) * s
    delta[entry_states] = lm_weight * bigram.log_initial + emission[0, entry_states]
    back = np.zeros((T, n), dtype=np.intp)
    for t in range(1, T):
        scores = delta[:, None] + trans
        best_src = scores.argmax(axis=0)          # first max = lowest source index
        delta = scores[best_src, np.arange(n)] + emission[t]
        back[t] = best_src
    final = int(delta.argmax())
    require(np.isfinite(delta[final]), "no admissible path through the utterance")
    path = [final]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()

    sequence = [phoneset.phone_of_state(path[0])]
    for prev, cur in zip(path, path[1:]):
        if entry[prev, cur]:
            sequence.append(phoneset.phone_of_state(cur))
    return sequence


def map_phones(sequence, phoneset, collapse=True):
    """Apply the scoring map symbol-wise, drop deleted symbols, and
    (by default) collapse adjacent duplicates the mapping introduced."""
    mapping = phoneset.scoring_map
    require(mapping is not None, "phone set has no scoring map")
    mapped = []
    for sym in sequence:
        require(sym in mapping, f"unknown phone symbol {sym!r}")
        target = mapping[sym]
        if target is None:
            continue
        mapped.append(target)
    if not collapse:
        return mapped
    out = []
    for sym in mapped:
        if not out or out[-1] != sym:
            out.append(sym)
    return out


def load_phone_map(path):
    """Two-column map file: training symbol, scoring symbol ("-" deletes)."""
    mapping = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        require(len(parts) == 2, f"malformed map row: {line!r}")
        mapping[parts[0]] = None if parts[1] == "-" else parts[1]
    return mapping


def bundled_timit_map():
    ref = importlib.resources.files("ramkit").joinpath("data/timit_48to39.tsv")
    with importlib.resources.as_file(ref) as path:
        return load_phone_map(path)


def edit_distance_counts(reference, hypothesis):
    """Levenshtein alignment counts (substitutions, deletions, insertions)
    with unit costs; ties prefer match/substitution, then deletion."""
    rn, hn = len(reference), len(hypothesis)
    dist = np.zeros((rn + 1, hn + 1), dtype=np.intp)
    dist[:, 0] = np.arange(rn + 1)
    dist[0, :] = np.arange(hn + 1)
    for i in range(1, rn + 1):
        for j in range(1, hn + 1):
            sub = dist[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)
    subs = dels = inss = 0
    i, j = rn, hn
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            subs += reference[i - 1] != hypothesis[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1
    return int(subs), int(dels), int(inss)


def compute_per(references, hypotheses):
    """Corpus phone error rate in percent plus per-utterance counts.

    Both arguments map utterance id to a phone sequence and must cover
    the same ids.  PER = 100 * (S + D + I) / total reference length.
    """
    require(set(references) == set(hypotheses),
            "reference and hypothesis utterance ids differ")
    require(len(references) > 0, "nothing to score")
    total_err = 0
    total_ref = 0
    per_utterance = {}
    for utt_id in sorted(references):
        ref = list(references[utt_id])
        hyp = list(hypotheses[utt_id])
        subs, dels, inss = edit_distance_counts(ref, hyp)
        per_utterance[utt_id] = (subs, dels, inss, len(ref))
        total_err += subs + dels + inss
        total_ref += len(ref)
    require(total_ref > 0, "total reference length is zero")
    return 100.0 * total_err / total_ref, per_utterance


def write_bigram(path, bigram):
    """lm.tsv rows: "from to logprob"; initial probabilities use the
    pseudo-phone "<s>" in the from column."""
    with open(path, "w") as fh:
        for i, p in enumerate(bigram.phones):
            fh.write(f"<s>\t{p}\t{float(bigram.log_initial[i])!r}\n")
        for i, p in enumerate(bigram.phones):
            for j, q in enumerate(bigram.phones):
                fh.write(f"{p}\t{q}\t{float(bigram.log_transition[i, j])!r}\n")


def read_bigram(path, phones):
    index = {p: i for i, p in enumerate(phones)}
    log_init = np.full(len(phones), -np.inf, dtype=DTYPE)
    log_trans = np.full((len(phones), len(phones)), -np.inf, dtype=DTYPE)
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        src, dst, value = line.split("\t")
        if src == "<s>":
            log_init[index[dst]] = float(value)
        else:
            log_trans[index[src], index[dst]] = float(value)
    return BigramModel(phones=list(phones), log_initial=log_init,
                       log_transition=log_trans)


def write_sequences(path, sequences):
    """utt_id<TAB>space-delimited phones, one row per utterance."""
    with open(path, "w") as fh:
        for utt_id in sorted(sequences):
            fh.write(f"{utt_id}\t{' '.join(sequences[utt_id])}\n")


def read_sequences(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        utt_id, phones = line.split("\t")
        out[utt_id] = phones.split()
    return out
