"""Synthetic corpus generation and the experiment grid.

The corpus generator stands in for a licensed speech corpus.  Phones are
left-to-right Gaussian-emission HMM chains with well-separated means.
Each speaker perturbs the canonical emissions with an affine distortion
(A_s close to identity plus a bias) and adds an offset drawn from a
planted low-dimensional subspace, so fMLLR, CMN and i-vectors all have
signal to recover.  Speakers are disjoint across the train/dev/test
splits and every byte of the output is a deterministic function of the
spec.

The grid runner executes (feature mode x i-vector mode x architecture)
cells, repeating each with fresh derived seeds, and reports mean and
population standard deviation of the test PER per cell.  Every cell's
randomness derives only from its config id and repeat index, so results
do not depend on execution order or parallelism.  Sub-artifacts (GMMs,
extractors, transform sets, trained models) land in a work directory
under config-hash filenames and are reused when present.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import decoding, fmllr, ivector, network, training
from .cells import CellKind
from .decoding import BigramModel, PhoneHmm, PhoneSet
from .features import Utterance, cmn_offline, read_corpus, write_corpus
from .numerics import DTYPE, Rng, matmul, read_matrix, require, write_matrix

SPLIT_NAMES = ("train", "dev", "test")

FEATURE_MODES = ("fmllr", "raw", "cmn_speaker", "cmn_utterance")
IVECTOR_MODES = ("none", "off_spk/off_spk", "off_utt/off_utt",
                 "online/off_spk", "online/off_utt", "online/online")
ARCHITECTURES = ("ff", "lstm", "gru", "relugru", "mrelugru")


@dataclass
class SyntheticSpec:
    num_phones: int = 10
    states_per_phone: int = 3
    feature_dim: int = 24
    num_speakers: int = 20
    utterances_per_speaker: int = 10
    phones_per_utterance: tuple = (4, 8)
    frames_per_state: tuple = (2, 5)
    subspace_dim: int = 8
    speaker_offset_scale: float = 1.5
    speaker_transform_scale: float = 0.1
    noise_level: float = 0.5
    mean_scale: float = 2.0
    split_fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 2024

    def __post_init__(self):
        require(self.num_phones >= 1 and self.states_per_phone >= 1, "invalid phone layout")
        require(self.subspace_dim <= self.feature_dim,
                "planted subspace cannot exceed the feature dimension")
        require(abs(sum(self.split_fractions) - 1.0) < 1e-9, "split fractions must sum to 1")

    @property
    def phones(self):
        return [f"ph{p:02d}" for p in range(self.num_phones)]


@dataclass
class SyntheticTruth:
    """The generative model behind a corpus; used by oracle checks."""
    spec: SyntheticSpec
    state_means: np.ndarray          # (P*S, D)
    subspace: np.ndarray             # (D, K) orthonormal columns
    speaker_coords: dict             # speaker -> (K,) planted coordinates
    speaker_transforms: dict         # speaker -> FmllrTransform (canonical -> observed)


def _speaker_split(spec):
    speakers = [f"spk{k:03d}" for k in range(spec.num_speakers)]
    n_train = int(round(spec.split_fractions[0] * spec.num_speakers))
    n_dev = int(round(spec.split_fractions[1] * spec.num_speakers))
    return {
        "train": speakers[:n_train],
        "dev": speakers[n_train:n_train + n_dev],
        "test": speakers[n_train + n_dev:],
    }


def generate_synthetic_corpus(spec, out_dir):
    """Write train/dev/test corpora plus phones.txt and a truth/ directory.

    Returns the SyntheticTruth used to generate the data.
    """
    out_dir = Path(out_dir)
    rng = Rng(spec.seed)
    p_count, s_count, dim = spec.num_phones, spec.states_per_phone, spec.feature_dim
    means = spec.mean_scale * rng.child("means").normal(size=(p_count, s_count, dim))
    raw_basis = rng.child("subspace").normal(size=(dim, spec.subspace_dim))
    subspace, _ = np.linalg.qr(raw_basis)

    split = _speaker_split(spec)
    coords = {}
    transforms = {}
    for name in SPLIT_NAMES:
        utterances = []
        for speaker in split[name]:
            y = rng.child("coords", speaker).normal(size=spec.subspace_dim)
            coords[speaker] = y
            a = np.eye(dim) + spec.speaker_transform_scale * \
                rng.child("transform", speaker).normal(size=(dim, dim)) / np.sqrt(dim)
            bias = spec.speaker_transform_scale * rng.child("bias", speaker).normal(size=dim)
            offset = spec.speaker_offset_scale * (subspace @ y)
            transforms[speaker] = fmllr.FmllrTransform(a=a.astype(DTYPE),
                                                       b=(bias + offset).astype(DTYPE))
            for k in range(spec.utterances_per_speaker):
                utt_rng = rng.child("utt", speaker, k)
                n_phones = int(utt_rng.integers(spec.phones_per_utterance[0],
                                                spec.phones_per_utterance[1] + 1))
                phone_ids = utt_rng.integers(0, p_count, size=n_phones)
                frames = []
                labels = []
                for p in phone_ids:
                    for j in range(s_count):
                        dwell = int(utt_rng.integers(spec.frames_per_state[0],
                                                     spec.frames_per_state[1] + 1))
                        noise = spec.noise_level * utt_rng.normal(size=(dwell, dim))
                        frames.append(means[p, j] + noise)
                        labels.extend([int(p) * s_count + j] * dwell)
                canonical = np.concatenate(frames, axis=0)
                observed = fmllr.apply_fmllr(transforms[speaker], canonical)
                utterances.append(Utterance(
                    utt_id=f"{speaker}-u{k:03d}", speaker_id=speaker,
                    frames=observed, labels=np.array(labels, dtype=np.intp),
                    transcript=[spec.phones[p] for p in phone_ids]))
        write_corpus(out_dir / name, utterances)

    (out_dir / "phones.txt").write_text("".join(p + "\n" for p in spec.phones))
    truth_dir = out_dir / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    write_matrix(truth_dir / "state_means.mat", means.reshape(p_count * s_count, dim))
    write_matrix(truth_dir / "subspace.mat", subspace)
    with open(truth_dir / "speaker_coords.tsv", "w") as fh:
        for speaker in sorted(coords):
            values = "\t".join(repr(float(v)) for v in coords[speaker])
            fh.write(f"{speaker}\t{values}\n")
    fmllr.save_transform_set(truth_dir / "speaker_transforms.bin", transforms)
    info = {
        "num_phones": spec.num_phones, "states_per_phone": spec.states_per_phone,
        "feature_dim": spec.feature_dim, "subspace_dim": spec.subspace_dim,
        "noise_level": spec.noise_level, "seed": spec.seed,
        "splits": {name: split[name] for name in SPLIT_NAMES},
    }
    (truth_dir / "info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return SyntheticTruth(spec=spec, state_means=means.reshape(p_count * s_count, dim),
                          subspace=subspace, speaker_coords=coords,
                          speaker_transforms=transforms)


def load_truth(corpus_root):
    truth_dir = Path(corpus_root) / "truth"
    info = json.loads((truth_dir / "info.json").read_text())
    means = read_matrix(truth_dir / "state_means.mat")
    subspace = read_matrix(truth_dir / "subspace.mat")
    coords = {}
    for line in (truth_dir / "speaker_coords.tsv").read_text().splitlines():
        parts = line.split("\t")
        coords[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=DTYPE)
    transforms = fmllr.load_transform_set(truth_dir / "speaker_transforms.bin")
    return info, means, subspace, coords, transforms


def load_phones(corpus_root):
    return (Path(corpus_root) / "phones.txt").read_text().split()


def oracle_posteriors(truth_means, noise_level, transform, frames):
    """Frame posteriors from the true generative model of one speaker."""
    inv_a = np.linalg.inv(transform.a)
    canonical = matmul(frames - transform.b, inv_a.T)
    diff2 = ((canonical[:, None, :] - truth_means[None, :, :]) ** 2).sum(axis=2)
    loglik = -0.5 * diff2 / max(noise_level, 1e-6) ** 2
    shifted = loglik - loglik.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class HarnessSettings:
    """Desk-scale defaults for the experiment pipeline.  Paper-scale values
    (2048-unit FF stacks, 1024-unit RNNs) are reachable by overriding."""
    hidden_dim: int = 64
    rnn_layers: int = 4
    ff_layers: int = 3
    frame_context: int = 11
    output_delay: int = 5
    dropout_p: float = 0.2
    adam_lr: float = 1e-3
    max_epochs_per_stage: int = 20
    quick_schedule: bool = False
    ubm_components: int = 16
    ivector_dim: int = 8
    ivector_chunk: int = 30
    ivector_max_count: int = 600
    fmllr_components: int = 8
    sat_alternations: int = 2
    lm_weight: float = 1.0
    bigram_floor: float = 0.1
    self_loop_prob: float = 0.5
    prep_seed: int = 97


@dataclass
class ExperimentConfig:
    data: str = "raw"
    ivector_training: str = "none"
    ivector_testing: str = "none"
    arch: str = "gru"
    repeats: int = 10
    seed: int = 1234

    def __post_init__(self):
        require(self.data in FEATURE_MODES, f"unknown feature mode {self.data!r}")
        require(self.arch in ARCHITECTURES, f"unknown architecture {self.arch!r}")
        pair = f"{self.ivector_training}/{self.ivector_testing}"
        require(pair == "none/none" or pair in IVECTOR_MODES,
                f"unsupported i-vector mode pair {pair!r}")

    @property
    def config_id(self):
        return f"{self.data}|{self.ivector_training}|{self.ivector_testing}|{self.arch}"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    pers: list

    @property
    def mean(self):
        return float(np.mean(self.pers))

    @property
    def std(self):
        # population (N-divisor) standard deviation
        return float(np.std(self.pers))


def _hash_name(*parts):
    text = "|".join(str(p) for p in parts)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _atomic_bytes_equal_write(path, writer):
    """Run `writer(tmp_path)` and atomically move the result into place."""
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    writer(tmp)
    os.replace(tmp, path)


def _load_splits(corpus_root):
    return {name: read_corpus(Path(corpus_root) / name) for name in SPLIT_NAMES}


def _prepare_base_features(splits, data_mode, corpus_root, settings, workdir):
    """Apply the feature mode (raw, CMN, or fMLLR) to every split."""
    if data_mode == "raw":
        return {name: list(utts) for name, utts in splits.items()}
    if data_mode in ("cmn_speaker", "cmn_utterance"):
        scope = "speaker" if data_mode == "cmn_speaker" else "utterance"
        return {name: cmn_offline(utts, scope) for name, utts in splits.items()}
    require(data_mode == "fmllr", f"unknown feature mode {data_mode!r}")

    cache = Path(workdir) / f"fmllr-gmm-{_hash_name(corpus_root, settings.fmllr_components, settings.sat_alternations, settings.prep_seed)}.bin"
    if cache.exists():
        gmm = ivector.load_gmm(cache)
    else:
        rng = Rng(settings.prep_seed).child("fmllr", corpus_root)
        gmm = fmllr.sat_refine(splits["train"], settings.fmllr_components, rng,
                               alternations=settings.sat_alternations)
        _atomic_bytes_equal_write(cache, lambda p: ivector.save_gmm(p, gmm))
    out = {}
    for name, utts in splits.items():
        tcache = Path(workdir) / f"fmllr-trans-{_hash_name(corpus_root, name, settings.fmllr_components, settings.sat_alternations, settings.prep_seed)}.bin"
        if tcache.exists():
            transforms = fmllr.load_transform_set(tcache)
            adapted = [u.with_frames(fmllr.apply_fmllr(transforms[u.speaker_id], u.frames))
                       for u in utts]
        else:
            adapted, transforms = fmllr.two_pass_adapt(gmm, gmm, utts, scope="speaker")
            _atomic_bytes_equal_write(tcache, lambda p: fmllr.save_transform_set(p, transforms))
        out[name] = adapted
    return out


def _train_ivector_artifacts(splits, corpus_root, settings, workdir):
    """UBM + extractor trained once per corpus; shared by every i-vector mode."""
    key = _hash_name(corpus_root, settings.ubm_components, settings.ivector_dim,
                     settings.prep_seed)
    ubm_path = Path(workdir) / f"ubm-{key}.bin"
    ext_path = Path(workdir) / f"extractor-{key}.bin"
    if ubm_path.exists() and ext_path.exists():
        return ivector.load_gmm(ubm_path), ivector.load_extractor(ext_path)
    rng = Rng(settings.prep_seed).child("ivector", corpus_root)
    # UBM sees speaker-normalized features; the accumulators below use the
    # raw features so speaker information survives
    normalized = cmn_offline(splits["train"], "speaker")
    ubm_frames = np.concatenate([u.frames for u in normalized], axis=0)
    ubm = ivector.train_ubm(ubm_frames, settings.ubm_components, rng=rng.child("ubm"))
    groups = ivector.make_pseudo_speakers(splits["train"])
    stats_list = []
    for _, utts in groups:
        frames = np.concatenate([u.frames for u in utts], axis=0)
        stats_list.append(ivector.accumulate_stats(ubm, frames))
    extractor = ivector.train_extractor(ubm, stats_list, settings.ivector_dim,
                                        rng=rng.child("extractor"))
    _atomic_bytes_equal_write(ubm_path, lambda p: ivector.save_gmm(p, ubm))
    _atomic_bytes_equal_write(ext_path, lambda p: ivector.save_extractor(p, extractor))
    return ubm, extractor


def _offline_ivectors(extractor, utts, scope, settings):
    """Per-utterance map of constant i-vectors for an offline mode."""
    out = {}
    if scope == "utterance":
        for u in utts:
            stats = ivector.accumulate_stats(extractor.ubm, u.frames)
            stats = ivector.saturate_stats(stats, settings.ivector_max_count)
            out[u.utt_id] = ivector.extract_ivector(extractor, stats)
        return out
    by_speaker = {}
    for u in utts:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    for speaker, members in by_speaker.items():
        frames = np.concatenate([u.frames for u in members], axis=0)
        stats = ivector.accumulate_stats(extractor.ubm, frames)
        stats = ivector.saturate_stats(stats, settings.ivector_max_count)
        vec = ivector.extract_ivector(extractor, stats)
        for u in members:
            out[u.utt_id] = vec
    return out


def _online_ivectors(extractor, groups, settings):
    """Causal per-frame i-vector rows for each utterance.

    Statistics carry over between the utterances of a group (pseudo-speaker
    for training data, true speaker for test data); frames in a chunk see
    the i-vector extracted after the previous chunk.
    """
    k = extractor.ivector_dim
    out = {}
    for _, utts in groups:
        running = ivector.zero_stats(extractor.ubm.num_components, extractor.ubm.dim)
        current = np.zeros(k, dtype=DTYPE)
        for u in utts:
            rows = np.empty((u.frames.shape[0], k), dtype=DTYPE)
            for start in range(0, u.frames.shape[0], settings.ivector_chunk):
                stop = min(start + settings.ivector_chunk, u.frames.shape[0])
                rows[start:stop] = current
                running = running + ivector.accumulate_stats(extractor.ubm,
                                                             u.frames[start:stop])
                sat = ivector.saturate_stats(running, settings.ivector_max_count)
                current = ivector.extract_ivector(extractor, sat)
            out[u.utt_id] = rows
    return out


def _speaker_groups(utts):
    by_speaker = {}
    for u in utts:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    return [(speaker, members) for speaker, members in by_speaker.items()]


def _ivector_rows_for_split(extractor, raw_utts, mode, split_name, settings):
    """Per-utterance (T, K) i-vector rows under the given extraction mode.
    Offline modes tile one constant vector; online mode varies per frame."""
    if mode in ("off_utt", "off_spk"):
        scope = "utterance" if mode == "off_utt" else "speaker"
        vecs = _offline_ivectors(extractor, raw_utts, scope, settings)
        return {u.utt_id: np.tile(vecs[u.utt_id], (u.frames.shape[0], 1))
                for u in raw_utts}
    require(mode == "online", f"unknown i-vector mode {mode!r}")
    groups = ivector.make_pseudo_speakers(raw_utts) if split_name == "train" \
        else _speaker_groups(raw_utts)
    return _online_ivectors(extractor, groups, settings)


def _attach_ivectors(base_utts, raw_utts, extractor, mode, split_name, settings):
    if mode == "none":
        return list(base_utts)
    rows_map = _ivector_rows_for_split(extractor, raw_utts, mode, split_name, settings)
    return [u.with_frames(np.concatenate([u.frames, rows_map[u.utt_id]], axis=1))
            for u in base_utts]


@dataclass
class PreparedData:
    train: list
    dev: list
    test: list
    phones: list
    states_per_phone: int


def prepare_experiment_data(config, corpus_root, settings, workdir):
    """Feature mode + i-vector mode preparation shared by all repeats."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(corpus_root)
    phones = load_phones(corpus_root)
    info = json.loads((Path(corpus_root) / "truth" / "info.json").read_text())
    base = _prepare_base_features(splits, config.data, str(corpus_root), settings, workdir)
    if config.ivector_training != "none":
        _, extractor = _train_ivector_artifacts(splits, str(corpus_root), settings, workdir)
        train = _attach_ivectors(base["train"], splits["train"], extractor,
                                 config.ivector_training, "train", settings)
        dev = _attach_ivectors(base["dev"], splits["dev"], extractor,
                               config.ivector_training, "dev", settings)
        test = _attach_ivectors(base["test"], splits["test"], extractor,
                                config.ivector_testing, "test", settings)
    else:
        train, dev, test = base["train"], base["dev"], base["test"]
    return PreparedData(train=train, dev=dev, test=test, phones=phones,
                        states_per_phone=info["states_per_phone"])


def _network_inputs(utts, arch, settings):
    """Frame stacking for feed-forward nets; recurrent nets take frames as-is."""
    if arch != "ff":
        return list(utts)
    return [u.with_frames(training.stack_frames(u.frames, settings.frame_context))
            for u in utts]


def _schedule_for_arch(arch, settings):
    if settings.quick_schedule:
        return [training.Stage("adam", settings.adam_lr, 256)]
    return training.schedule_for(CellKind.FF_RELU if arch == "ff" else CellKind(arch),
                                 adam_lr=settings.adam_lr)


def train_model_for_experiment(config, prepared, repeat_idx, settings):
    arch = config.arch
    kind = CellKind.FF_RELU if arch == "ff" else CellKind(arch)
    train_utts = _network_inputs(prepared.train, arch, settings)
    dev_utts = _network_inputs(prepared.dev, arch, settings)
    input_dim = train_utts[0].frames.shape[1]
    output_dim = len(prepared.phones) * prepared.states_per_phone
    rng = Rng(config.seed).child(config.config_id, repeat_idx)
    model = network.build_network(
        kind, input_dim, output_dim,
        hidden_dim=settings.hidden_dim,
        num_layers=settings.ff_layers if arch == "ff" else settings.rnn_layers,
        output_delay=0 if arch == "ff" else settings.output_delay,
        frame_context=settings.frame_context if arch == "ff" else 1,
        rng=rng.child("init"))
    model, log = training.train_staged(
        model, _schedule_for_arch(arch, settings), train_utts, dev_utts,
        rng.child("train"), dropout_p=settings.dropout_p,
        max_epochs_per_stage=settings.max_epochs_per_stage)
    return model, log


def decode_utterances(model, utts, priors, bigram, hmm, phoneset, lm_weight=1.0):
    """Viterbi-decode each utterance with the model's output delay honored."""
    hyps = {}
    delay = model.output_delay
    for u in utts:
        frames = u.frames
        if delay > 0:
            pad = np.repeat(frames[-1:], delay, axis=0)
            frames = np.concatenate([frames, pad], axis=0)
        probs, _ = network.network_forward(model, frames[:, None, :])
        posteriors = probs[delay:, 0, :]
        hyps[u.utt_id] = decoding.viterbi_decode(posteriors, priors, bigram, hmm,
                                                 phoneset, lm_weight)
    return hyps


def prior_only_baseline(test_utts, priors, bigram, hmm, phoneset, lm_weight=1.0):
    """Decode with information-free posteriors (each row equals the priors);
    the language model and topology alone drive the result."""
    hyps = {}
    for u in test_utts:
        posteriors = np.tile(priors, (u.frames.shape[0], 1))
        hyps[u.utt_id] = decoding.viterbi_decode(posteriors, priors, bigram, hmm,
                                                 phoneset, lm_weight)
    return hyps


def _scoring_objects(prepared, settings):
    phoneset = PhoneSet(phones=prepared.phones,
                        states_per_phone=prepared.states_per_phone,
                        scoring_map={p: p for p in prepared.phones})
    bigram = decoding.build_bigram([u.transcript for u in prepared.train],
                                   prepared.phones, settings.bigram_floor)
    hmm = PhoneHmm(states_per_phone=prepared.states_per_phone,
                   self_loop_prob=settings.self_loop_prob)
    priors = decoding.estimate_priors(prepared.train, phoneset.num_states)
    return phoneset, bigram, hmm, priors


def run_experiment(config, corpus_root, workdir, settings=None):
    """Full pipeline for one grid cell: normalize, adapt, train per repeat,
    decode, score.  Returns an ExperimentResult with all repeat PERs."""
    settings = settings or HarnessSettings()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    prepared = prepare_experiment_data(config, corpus_root, settings, workdir)
    phoneset, bigram, hmm, priors = _scoring_objects(prepared, settings)
    refs = {u.utt_id: decoding.map_phones(u.transcript, phoneset)
            for u in prepared.test}
    test_utts = _network_inputs(prepared.test, config.arch, settings)
    pers = []
    for repeat_idx in range(config.repeats):
        model_path = workdir / f"model-{_hash_name(corpus_root, config.config_id, repeat_idx, config.seed, repr(settings))}.bin"
        if model_path.exists():
            model = network.load_model(model_path)
        else:
            model, _ = train_model_for_experiment(config, prepared, repeat_idx, settings)
            _atomic_bytes_equal_write(model_path, lambda p: network.save_model(p, model))
        hyps = decode_utterances(model, test_utts, priors, bigram, hmm, phoneset,
                                 settings.lm_weight)
        hyps = {uid: decoding.map_phones(seq, phoneset) for uid, seq in hyps.items()}
        per, _ = decoding.compute_per(refs, hyps)
        pers.append(per)
    return ExperimentResult(config=config, pers=pers)


def _run_cell(args):
    config, corpus_root, workdir, settings = args
    return run_experiment(config, corpus_root, workdir, settings)


def run_grid(configs, corpus_root, out_csv, workdir, settings=None, jobs=1):
    """Run every config, write one CSV row per cell, and return the results.

    Rows appear in config order regardless of `jobs`, so reruns with the
    same inputs produce byte-identical files.
    """
    settings = settings or HarnessSettings()
    tasks = [(c, str(corpus_root), str(workdir), settings) for c in configs]
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            results = pool.map(_run_cell, tasks)
    else:
        results = [_run_cell(t) for t in tasks]
    with open(out_csv, "w") as fh:
        fh.write("data,ivec_train,ivec_test,arch,mean_per,std_per,repeats\n")
        for r in results:
            c = r.config
            fh.write(f"{c.data},{c.ivector_training},{c.ivector_testing},{c.arch},"
                     f"{r.mean!r},{r.std!r},{c.repeats}\n")
    return results


def default_grid_configs(repeats=10, seed=1234, features=FEATURE_MODES,
                         ivectors=IVECTOR_MODES, archs=ARCHITECTURES):
    """Cross product mirroring the experiment tables: per feature block,
    six i-vector rows, one column per architecture."""
    configs = []
    for data in features:
        for pair in ivectors:
            if pair == "none":
                ivt, ive = "none", "none"
            else:
                ivt, ive = pair.split("/")
            for arch in archs:
                configs.append(ExperimentConfig(data=data, ivector_training=ivt,
                                                ivector_testing=ive, arch=arch,
                                                repeats=repeats, seed=seed))
    return configs


def parse_grid_config(path):
    """Read a grid description from a TOML file.

    Recognized top-level keys: seed, repeats, features, ivectors, archs
    (the cross product defines the cells).  An optional [settings] table
    overrides HarnessSettings fields.
    """
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    settings = HarnessSettings(**raw.get("settings", {}))
    configs = default_grid_configs(
        repeats=raw.get("repeats", 10),
        seed=raw.get("seed", 1234),
        features=raw.get("features", list(FEATURE_MODES)),
        ivectors=raw.get("ivectors", list(IVECTOR_MODES)),
        archs=raw.get("archs", list(ARCHITECTURES)))
    return configs, settings
