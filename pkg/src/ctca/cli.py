"""Command-line entry point.

Subcommands: synth, bpe-train, featurize, train, lm-train, decode, eval-wer,
alpha-sweep, ablation, plot. Exit codes: 0 success, 1 usage/config error
(one-line diagnosis on stderr), 2 data or model error. All randomness flows
from --seed (or the CTCA_SEED environment variable, or the config file).
Outputs are written to a temp file and atomically renamed, so partial
results never land in place.

Any extra argument of the form --section.field=value overrides that config
entry; --dump-config writes the effective configuration for reproducible
reruns.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, save_config
from .features import (ManifestRecord, SynthConfig, read_manifest, synth_corpus,
                       synth_waveform, write_manifest, write_wav)
from .model import ModelConfig, build_model_params
from .subword import SubwordVocab, bpe_train, load_vocab, save_vocab
from .training import (TrainConfig, checkpoint_meta, load_checkpoint,
                       pack_training_state, prepare_dataset, save_checkpoint,
                       train, unpack_training_state, write_metrics_csv)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def main(argv=None) -> int:
    try:
        return _run(sys.argv[1:] if argv is None else list(argv))
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def _run(argv) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = []
    for tok in extra:
        if tok.startswith("--") and "=" in tok and "." in tok.split("=", 1)[0]:
            overrides.append(tok)
        else:
            raise UsageError(f"unrecognized argument {tok!r}")
    if getattr(args, "func", None) is None:
        raise UsageError("missing subcommand (see --help)")
    config = load_config(args.config, overrides)
    seed = _resolve_seed(args.seed, config)
    if args.dump_config:
        save_config(args.dump_config, config)
    return args.func(args, config, seed)


def _resolve_seed(flag_seed, config: RunConfig) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("CTCA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"CTCA_SEED must be an integer, got {env!r}") from None
    return config.seed


def _build_parser() -> Parser:
    parser = Parser(prog="ctca",
                    description="Desk-scale hybrid CTC/attention speech recognizer")
    parser.add_argument("--config", help="YAML config file (defaults apply without it)")
    parser.add_argument("--seed", type=int, default=None,
                        help="PRNG seed (default: CTCA_SEED env or config seed)")
    parser.add_argument("--threads", type=int, default=1,
                        help="upper bound on worker threads (execution is "
                             "currently serial)")
    parser.add_argument("--dump-config", metavar="PATH", default=None,
                        help="write the effective config to PATH and continue")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("synth", help="generate the synthetic corpus manifests")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--write-wavs", action="store_true",
                   help="materialize WAV files instead of regenerable records")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bpe-train", help="learn a subword vocabulary from transcripts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bpe_train)

    p = sub.add_parser("featurize", help="extract filterbank features to a cache file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--augment", action="store_true",
                   help="include 3-fold speed-perturbed copies")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the hybrid model")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--dev-manifest")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--features", help="feature cache from `featurize`")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lm-train", help="train the subword language model")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="UTF-8 text, one sentence per line")
    src.add_argument("--manifest", help="use the transcripts of this manifest")
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("decode", help="beam-search or CTC-greedy decoding")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="n-best output file")
    p.add_argument("--lm", help="LM checkpoint for shallow fusion")
    p.add_argument("--mode", choices=["beam", "ctc-greedy"], default="beam")
    p.add_argument("--features", help="feature cache from `featurize`")
    p.add_argument("--dump-posteriors", metavar="DIR",
                   help="write per-utterance CTC posterior files")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-wer", help="score an n-best file against references")
    p.add_argument("--manifest", required=True, help="reference transcripts")
    p.add_argument("--nbest", required=True)
    p.set_defaults(func=cmd_eval_wer)

    p = sub.add_parser("alpha-sweep", help="train and score one model per alpha")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--dev-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--alphas", default="0.0,0.1,0.5,1.0",
                   help="comma-separated weights in [0, 1]")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_alpha_sweep)

    p = sub.add_parser("ablation", help="encoder depth x CTC-branch grid")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--dev-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--depths", default="1,2", help="comma-separated BiLSTM depths")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("plot", help="render a metrics or sweep CSV to SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


# ---------------------------------------------------------------------------
# helpers


def _model_config(config: RunConfig) -> ModelConfig:
    return ModelConfig(encoder=config.encoder, attention=config.attention,
                       ctc_branch=config.ctc_branch)


def _prepare(manifest_path, vocab, config: RunConfig, seed,
             augment=False, cache_path=None):
    records = read_manifest(manifest_path)
    cache = None
    if cache_path:
        cache, _ = load_checkpoint(cache_path)
    return prepare_dataset(records, vocab, config.features, config.synth, seed,
                           augment=augment, cache=cache)


def _load_model(path, config: RunConfig, vocab: SubwordVocab, seed: int):
    params = build_model_params(_model_config(config), vocab.size, seed)
    tensors, meta = load_checkpoint(path)
    unpack_training_state(tensors, params, meta["epsilon"])
    return params


def _load_lm(path, config: RunConfig, vocab: SubwordVocab):
    from .lm import init_lm_params
    params = init_lm_params(config.lm, vocab.size, 0)
    tensors, _ = load_checkpoint(path)
    for name, p in params.items():
        if name not in tensors:
            raise ValueError(f"{path}: LM checkpoint missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise ValueError(f"{path}: LM tensor {name} has shape "
                             f"{tensors[name].shape}, expected {p.data.shape}")
        p.data = tensors[name].copy()
    return params


def _harness_data(args, vocab, config, seed):
    from .evaluate import HarnessData
    return HarnessData(
        train=_prepare(args.train_manifest, vocab, config, seed),
        dev=_prepare(args.dev_manifest, vocab, config, seed),
        test=_prepare(args.test_manifest, vocab, config, seed),
        vocab=vocab)


def _atomic_write_text(path, text: str) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, config: RunConfig, seed: int) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    utts = synth_corpus(config.synth, seed)
    by_split: dict[str, list[ManifestRecord]] = {"train": [], "dev": [], "test": []}
    for u in utts:
        path = "synth"
        if args.write_wavs:
            wav_dir = out / "wav"
            wav_dir.mkdir(exist_ok=True)
            wav_path = wav_dir / f"{u.utterance_id}.wav"
            write_wav(wav_path, synth_waveform(u.transcript, u.index,
                                               config.synth, seed))
            path = str(wav_path)
        by_split[u.split].append(ManifestRecord(u.utterance_id, path, u.transcript))
    for split, records in by_split.items():
        write_manifest(out / f"{split}.tsv", records)
    print(f"wrote {len(utts)} utterances to {out}/{{train,dev,test}}.tsv")
    return 0


def cmd_bpe_train(args, config: RunConfig, seed: int) -> int:
    records = read_manifest(args.manifest)
    vocab = bpe_train([r.transcript for r in records], config.bpe.num_merges)
    save_vocab(args.out, vocab)
    print(f"vocab: {vocab.size} units ({len(vocab.merges)} merges) -> {args.out}")
    return 0


def cmd_featurize(args, config: RunConfig, seed: int) -> int:
    vocab = SubwordVocab([], ["<blank>", "<sos>", "<eos>", "<unk>"])  # labels unused
    data = prepare_dataset(read_manifest(args.manifest), vocab, config.features,
                           config.synth, seed, augment=args.augment)
    tensors = {u.utterance_id: u.feats for u in data}
    save_checkpoint(args.out, tensors, {"config_json": "features-cache"})
    print(f"featurized {len(data)} utterances -> {args.out}")
    return 0


def cmd_train(args, config: RunConfig, seed: int) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = load_vocab(args.vocab)
    train_data = _prepare(args.train_manifest, vocab, config, seed,
                          augment=config.features.augment,
                          cache_path=args.features)
    dev_data = _prepare(args.dev_manifest, vocab, config, seed,
                        cache_path=args.features) if args.dev_manifest else []
    result = train(train_data, dev_data, vocab, _model_config(config),
                   config.train, seed, resume_from=args.resume,
                   log=lambda m: print(m, file=sys.stderr))
    from .config import dump_config
    meta = checkpoint_meta(dump_config(config), config.train.iterations,
                           result.opt, result.last_val, seed)
    save_checkpoint(out / "checkpoint.ckpt",
                    pack_training_state(result.params, result.opt), meta)
    write_metrics_csv(out / "metrics.csv", result.metrics)
    final = result.metrics[-1] if result.metrics else None
    if final:
        print(f"trained {len(result.metrics)} iterations; "
              f"final loss {final['train_loss']:.4f}, "
              f"val acc {final['val_acc'] if final['val_acc'] is not None else 'n/a'}")
    return 0


def cmd_lm_train(args, config: RunConfig, seed: int) -> int:
    from .lm import lm_train
    vocab = load_vocab(args.vocab)
    if args.corpus:
        corpus = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    else:
        corpus = [r.transcript for r in read_manifest(args.manifest)]
    params, losses = lm_train(corpus, vocab, config.lm, config.lm_train, seed,
                              log=lambda m: print(m, file=sys.stderr))
    save_checkpoint(args.out, {n: p.data for n, p in params.items()},
                    {"iteration": config.lm_train.epochs})
    print(f"trained LM for {config.lm_train.epochs} epochs "
          f"(final mean sentence nll {losses[-1]:.4f}) -> {args.out}")
    return 0


def cmd_decode(args, config: RunConfig, seed: int) -> int:
    import io

    from .ctc import save_posteriors
    from .evaluate import decode_utterance
    from .model import encoder_posteriors
    from .search import format_nbest

    vocab = load_vocab(args.vocab)
    params = _load_model(args.checkpoint, config, vocab, seed)
    lm = None
    if args.lm:
        lm = (_load_lm(args.lm, config, vocab), config.lm)
    data = _prepare(args.manifest, vocab, config, seed, cache_path=args.features)
    if args.dump_posteriors:
        Path(args.dump_posteriors).mkdir(parents=True, exist_ok=True)
    sink = io.StringIO()
    for utt in data:
        if args.dump_posteriors:
            _, q = encoder_posteriors(utt.feats, params, _model_config(config))
            save_posteriors(Path(args.dump_posteriors) / f"{utt.utterance_id}.post", q)
        text, hyps = decode_utterance(utt, params, _model_config(config), vocab,
                                      config.decode, lm=lm, mode=args.mode)
        if hyps:
            sink.write(format_nbest(utt.utterance_id, hyps, vocab, config.decode))
        else:  # ctc-greedy has a single hypothesis and no component scores
            sink.write(f"{utt.utterance_id}\t1\t0.0\t0.0\t0.0\t0.0\t{text}\n")
    _atomic_write_text(args.out, sink.getvalue())
    print(f"decoded {len(data)} utterances -> {args.out}")
    return 0


def cmd_eval_wer(args, config: RunConfig, seed: int) -> int:
    from .evaluate import WerReport, wer

    refs = {r.utterance_id: r.transcript for r in read_manifest(args.manifest)}
    hyps: dict[str, str] = {}
    with open(args.nbest, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 7:
                raise ValueError(f"{args.nbest}: expected 7 tab-separated fields, "
                                 f"got {len(parts)}")
            if parts[1] == "1":
                hyps[parts[0]] = parts[6]
    total = WerReport()
    for uid, ref in refs.items():
        if uid not in hyps:
            raise ValueError(f"{args.nbest}: no hypothesis for utterance {uid}")
        total.add(wer(ref.split(), hyps[uid].split()))
    print(f"WER {100 * total.wer:.2f}% "
          f"(S={total.substitutions} I={total.insertions} D={total.deletions} "
          f"N={total.ref_words})")
    return 0


def cmd_alpha_sweep(args, config: RunConfig, seed: int) -> int:
    from .evaluate import alpha_sweep, write_alpha_csv

    try:
        alphas = [float(a) for a in args.alphas.split(",") if a != ""]
    except ValueError:
        raise UsageError(f"--alphas must be comma-separated numbers, "
                         f"got {args.alphas!r}") from None
    vocab = load_vocab(args.vocab)
    data = _harness_data(args, vocab, config, seed)
    rows = alpha_sweep(data, _model_config(config), config.train, config.decode,
                       alphas, seed, log=lambda m: print(m, file=sys.stderr))
    write_alpha_csv(args.out, rows)
    print(f"alpha sweep ({len(rows)} runs) -> {args.out}")
    return 0


def cmd_ablation(args, config: RunConfig, seed: int) -> int:
    from .evaluate import ablation_grid, write_ablation_csv

    try:
        depths = [int(d) for d in args.depths.split(",") if d != ""]
    except ValueError:
        raise UsageError(f"--depths must be comma-separated integers, "
                         f"got {args.depths!r}") from None
    vocab = load_vocab(args.vocab)
    data = _harness_data(args, vocab, config, seed)
    rows = ablation_grid(data, _model_config(config), config.train, config.decode,
                         depths, seed, lm_config=config.lm,
                         lm_train_config=config.lm_train,
                         log=lambda m: print(m, file=sys.stderr))
    write_ablation_csv(args.out, rows)
    print(f"ablation grid ({len(rows)} cells) -> {args.out}")
    return 0


def cmd_plot(args, config: RunConfig, seed: int) -> int:
    from .evaluate import plot_csv
    plot_csv(args.csv, args.out)
    print(f"plotted {args.csv} -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
