"""Command-line entry points.

Subcommands:

    make-corpus       generate the synthetic train/dev/test corpora
    train             train an acoustic model on a corpus
    train-ivector     train the UBM and i-vector extractor
    extract-ivectors  extract i-vectors in any supported mode
    estimate-fmllr    estimate per-speaker or per-utterance transforms
    apply-fmllr       apply a transform set to a corpus
    decode            Viterbi phone decoding of a corpus
    score             PER between reference and hypothesis files
    grid              run a full experiment grid from a TOML config

Run `ramkit <command> --help` for the flags of each command.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import decoding, fmllr, harness, ivector, network, training
from .cells import CellKind
from .decoding import PhoneHmm, PhoneSet
from .features import CmnConfig, apply_cmn, global_mean_of, read_corpus, write_corpus
from .harness import ExperimentConfig, HarnessSettings, SyntheticSpec
from .numerics import Rng, read_matrix, write_matrix


def _cmd_make_corpus(args):
    spec = SyntheticSpec(
        num_phones=args.phones, states_per_phone=args.states,
        feature_dim=args.dim, num_speakers=args.speakers,
        utterances_per_speaker=args.utterances, seed=args.seed)
    harness.generate_synthetic_corpus(spec, args.out)
    print(f"wrote corpus with {spec.num_phones} phones, "
          f"{spec.num_speakers} speakers to {args.out}")


def _load_schedule(spec):
    if spec in ("ff", "rnn"):
        return training.ff_schedule() if spec == "ff" else training.rnn_schedule()
    stages = json.loads(Path(spec).read_text())
    return [training.Stage(optimizer=s["optimizer"], learning_rate=s["learning_rate"],
                           batch_size=s["batch_size"], momentum=s.get("momentum", 0.9))
            for s in stages]


def _attach_ivector_file(utterances, path):
    """ivecs.tsv rows: key (speaker or utterance id) + tab-separated reals."""
    table = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split("\t")
        table[parts[0]] = np.array([float(v) for v in parts[1:]])
    out = []
    for u in utterances:
        key = u.utt_id if u.utt_id in table else u.speaker_id
        if key not in table:
            raise SystemExit(f"no i-vector for utterance {u.utt_id} or its speaker")
        from .features import append_ivector
        out.append(u.with_frames(append_ivector(u.frames, table[key])))
    return out


def _cmd_train(args):
    kind = CellKind.FF_RELU if args.arch == "ff" else CellKind(args.arch)
    train_utts = read_corpus(args.features)
    dev_utts = read_corpus(args.dev_features)
    if args.ivectors != "none":
        train_utts = _attach_ivector_file(train_utts, args.ivectors)
        dev_utts = _attach_ivector_file(dev_utts, args.ivectors)
    context = args.context if kind == CellKind.FF_RELU else 1
    if context > 1:
        train_utts = [u.with_frames(training.stack_frames(u.frames, context))
                      for u in train_utts]
        dev_utts = [u.with_frames(training.stack_frames(u.frames, context))
                    for u in dev_utts]
    input_dim = train_utts[0].frames.shape[1]
    output_dim = 1 + max(int(np.max(u.labels)) for u in train_utts)
    rng = Rng(args.seed)
    model = network.build_network(
        kind, input_dim, output_dim, hidden_dim=args.hidden, num_layers=args.layers,
        output_delay=args.delay, frame_context=context, rng=rng.child("init"))
    schedule = _load_schedule(args.schedule or ("ff" if args.arch == "ff" else "rnn"))
    model, log = training.train_staged(model, schedule, train_utts, dev_utts,
                                       rng.child("train"), dropout_p=args.dropout,
                                       max_epochs_per_stage=args.max_epochs)
    network.save_model(args.out, model)
    if args.log:
        training.write_training_log(args.log, log)
    print(f"trained {args.arch} model -> {args.out} "
          f"(final dev loss {log[-1].dev_loss:.4f})")


def _cmd_train_ivector(args):
    utts = read_corpus(args.corpus)
    rng = Rng(args.seed)
    from .features import cmn_offline
    normalized = cmn_offline(utts, "speaker")
    ubm_frames = np.concatenate([u.frames for u in normalized], axis=0)
    ubm = ivector.train_ubm(ubm_frames, args.components, rng=rng.child("ubm"))
    groups = ivector.make_pseudo_speakers(utts) if args.pseudo_speakers \
        else _speaker_group_list(utts)
    stats_list = []
    for _, members in groups:
        frames = np.concatenate([u.frames for u in members], axis=0)
        stats_list.append(ivector.accumulate_stats(ubm, frames))
    extractor = ivector.train_extractor(ubm, stats_list, args.dim,
                                        rng=rng.child("extractor"))
    ivector.save_gmm(args.out_ubm, ubm)
    ivector.save_extractor(args.out_extractor, extractor)
    print(f"trained UBM ({args.components} components) and extractor "
          f"(K={args.dim}) on {len(stats_list)} speaker groups")


def _speaker_group_list(utts):
    groups = {}
    for u in utts:
        groups.setdefault(u.speaker_id, []).append(u)
    return list(groups.items())


def _cmd_extract_ivectors(args):
    extractor = ivector.load_extractor(args.extractor)
    utts = read_corpus(args.corpus)
    rows = []
    if args.mode == "offline-spk":
        for speaker, members in _speaker_group_list(utts):
            frames = np.concatenate([u.frames for u in members], axis=0)
            stats = ivector.saturate_stats(
                ivector.accumulate_stats(extractor.ubm, frames), args.max_count)
            vec = ivector.extract_ivector(extractor, stats)
            rows.append((speaker, vec))
    elif args.mode == "offline-utt":
        for u in utts:
            stats = ivector.saturate_stats(
                ivector.accumulate_stats(extractor.ubm, u.frames), args.max_count)
            rows.append((u.utt_id, ivector.extract_ivector(extractor, stats)))
    else:
        groups = ivector.make_pseudo_speakers(utts) if args.pseudo_speakers \
            else _speaker_group_list(utts)
        for _, members in groups:
            running = ivector.zero_stats(extractor.ubm.num_components, extractor.ubm.dim)
            for u in members:
                for start in range(0, u.frames.shape[0], args.chunk):
                    running = running + ivector.accumulate_stats(
                        extractor.ubm, u.frames[start:start + args.chunk])
                sat = ivector.saturate_stats(running, args.max_count)
                rows.append((u.utt_id, ivector.extract_ivector(extractor, sat)))
    with open(args.out, "w") as fh:
        for key, vec in rows:
            values = "\t".join(repr(float(v)) for v in vec)
            fh.write(f"{key}\t{values}\n")
    print(f"wrote {len(rows)} i-vectors to {args.out}")


def _cmd_estimate_fmllr(args):
    gmm = ivector.load_gmm(args.gmm)
    utts = read_corpus(args.corpus)
    _, transforms = fmllr.two_pass_adapt(gmm, gmm, utts, scope=args.scope,
                                         iterations=args.iterations)
    fmllr.save_transform_set(args.out, transforms)
    dets = {key: float(np.linalg.det(t.a)) for key, t in transforms.items()}
    print(f"estimated {len(transforms)} transforms "
          f"(|det A| range {min(map(abs, dets.values())):.3f}"
          f"..{max(map(abs, dets.values())):.3f}) -> {args.out}")


def _cmd_apply_fmllr(args):
    transforms = fmllr.load_transform_set(args.transforms)
    utts = read_corpus(args.corpus)
    out = []
    for u in utts:
        key = u.speaker_id if u.speaker_id in transforms else u.utt_id
        if key not in transforms:
            raise SystemExit(f"no transform for {u.utt_id} (speaker {u.speaker_id})")
        out.append(u.with_frames(fmllr.apply_fmllr(transforms[key], u.frames)))
    write_corpus(args.out, out)
    print(f"wrote adapted corpus to {args.out}")


def _cmd_decode(args):
    model = network.load_model(args.model)
    utts = read_corpus(args.corpus)
    phones = Path(args.phones).read_text().split()
    bigram = decoding.read_bigram(args.bigram, phones)
    priors = read_matrix(args.priors)[0]
    states_per_phone = len(priors) // len(phones)
    phoneset = PhoneSet(phones=phones, states_per_phone=states_per_phone,
                        scoring_map={p: p for p in phones})
    hmm = PhoneHmm(states_per_phone=states_per_phone, self_loop_prob=args.self_loop)
    if args.cmn != "none":
        mode = {"speaker": "offline_per_speaker", "utterance": "offline_per_utterance"}[args.cmn]
        utts = apply_cmn(utts, CmnConfig(mode=mode))
    if args.ivectors != "none":
        utts = _attach_ivector_file(utts, args.ivectors)
    if model.frame_context > 1:
        utts = [u.with_frames(training.stack_frames(u.frames, model.frame_context))
                for u in utts]
    hyps = harness.decode_utterances(model, utts, priors, bigram, hmm, phoneset,
                                     args.lm_weight)
    decoding.write_sequences(args.out, hyps)
    print(f"decoded {len(hyps)} utterances -> {args.out}")


def _cmd_score(args):
    refs = decoding.read_sequences(args.ref)
    hyps = decoding.read_sequences(args.hyp)
    if args.map:
        mapping = decoding.load_phone_map(args.map)
        symbols = sorted(set(mapping))
        phoneset = PhoneSet(phones=symbols, states_per_phone=1, scoring_map=mapping)
        refs = {k: decoding.map_phones(v, phoneset) for k, v in refs.items()}
        hyps = {k: decoding.map_phones(v, phoneset) for k, v in hyps.items()}
    per, per_utt = decoding.compute_per(refs, hyps)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("utt_id,substitutions,deletions,insertions,ref_length\n")
            for utt_id in sorted(per_utt):
                s, d, i, n = per_utt[utt_id]
                fh.write(f"{utt_id},{s},{d},{i},{n}\n")
    print(f"PER {per:.2f}%")


def _cmd_grid(args):
    configs, settings = harness.parse_grid_config(args.config)
    results = harness.run_grid(configs, args.corpus, args.out, args.workdir,
                               settings, jobs=args.jobs)
    print(f"wrote {len(results)} grid rows to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="ramkit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--phones", type=int, default=10)
    p.add_argument("--states", type=int, default=3)
    p.add_argument("--dim", type=int, default=24)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--utterances", type=int, default=10)
    p.add_argument("--seed", type=int, default=2024)
    p.set_defaults(func=_cmd_make_corpus)

    p = sub.add_parser("train", help="train an acoustic model")
    p.add_argument("--arch", choices=["ff", "lstm", "gru", "relugru", "mrelugru"],
                   required=True)
    p.add_argument("--features", required=True, help="training corpus directory")
    p.add_argument("--dev-features", required=True, help="development corpus directory")
    p.add_argument("--ivectors", default="none", help="ivecs.tsv file or 'none'")
    p.add_argument("--schedule", default=None,
                   help="'ff', 'rnn', or a JSON stage-list file (default by arch)")
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--delay", type=int, default=None)
    p.add_argument("--context", type=int, default=11)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--log", default=None, help="training log CSV")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("train-ivector", help="train UBM and i-vector extractor")
    p.add_argument("--corpus", required=True)
    p.add_argument("--components", type=int, default=64)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--pseudo-speakers", action="store_true")
    p.add_argument("--seed", type=int, default=97)
    p.add_argument("--out-ubm", required=True)
    p.add_argument("--out-extractor", required=True)
    p.set_defaults(func=_cmd_train_ivector)

    p = sub.add_parser("extract-ivectors", help="extract i-vectors for a corpus")
    p.add_argument("--mode", choices=["online", "offline-spk", "offline-utt"],
                   required=True)
    p.add_argument("--pseudo-speakers", action="store_true")
    p.add_argument("--ubm", default=None, help="unused; the extractor embeds its UBM")
    p.add_argument("--extractor", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--chunk", type=int, default=ivector.DEFAULT_CHUNK)
    p.add_argument("--max-count", type=int, default=ivector.DEFAULT_MAX_COUNT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract_ivectors)

    p = sub.add_parser("estimate-fmllr", help="estimate affine feature transforms")
    p.add_argument("--gmm", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--scope", choices=["speaker", "utterance"], default="speaker")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_estimate_fmllr)

    p = sub.add_parser("apply-fmllr", help="apply a transform set to a corpus")
    p.add_argument("--transforms", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_apply_fmllr)

    p = sub.add_parser("decode", help="Viterbi phone decoding")
    p.add_argument("--model", required=True)
    p.add_argument("--bigram", required=True, help="lm.tsv with 'from to logprob' rows")
    p.add_argument("--corpus", required=True)
    p.add_argument("--phones", required=True, help="phones.txt defining state order")
    p.add_argument("--priors", required=True, help="state priors (1xS matrix file)")
    p.add_argument("--cmn", choices=["none", "speaker", "utterance"], default="none")
    p.add_argument("--ivectors", default="none")
    p.add_argument("--lm-weight", type=float, default=1.0)
    p.add_argument("--self-loop", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("score", help="phone error rate between ref and hyp")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--map", default=None, help="training->scoring symbol map file")
    p.add_argument("--out", default=None, help="per-utterance alignment counts CSV")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("grid", help="run an experiment grid")
    p.add_argument("--config", required=True, help="grid TOML file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workdir", default="grid-work")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_grid)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
