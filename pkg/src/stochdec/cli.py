"""Command-line entry point: ``stochdec <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure
(including missing input files).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import gradsuite
from .checkpoint import CheckpointError
from .corpus import (Vocab, encode_corpus, generate_copy_corpus, generate_variation_corpus,
                     make_batch, read_key_values, read_parallel_corpus, write_key_values,
                     write_parallel_corpus)
from .decoding import beam_decode, greedy_decode, sample_translations
from .inference import rate_diagnostic, sequence_elbo
from .models import BASELINE
from .training import EVAL, LATENT, TrainConfig, load_model, substream, train

logger = logging.getLogger("stochdec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags or a request the chosen model cannot serve."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def _run_dir_model(run_dir):
    """Load the model, vocabularies and checkpoint step from a training run directory.

    ``run_dir`` may also point straight at a checkpoint inside a run.
    """
    run = _existing(run_dir)
    ckpt = run / "final" if (run / "final").is_dir() else run
    vocab_dir = run if (run / "src.vocab").exists() else ckpt.parent
    model, infnet, step = load_model(ckpt)
    src_vocab = Vocab.load(_existing(vocab_dir / "src.vocab"))
    tgt_vocab = Vocab.load(_existing(vocab_dir / "tgt.vocab"))
    return model, infnet, src_vocab, tgt_vocab


def _input_lines(path) -> List[List[str]]:
    text = sys.stdin.read() if path in (None, "-") else _existing(path).read_text(encoding="utf-8")
    return [line.split() for line in text.splitlines()]


def _emit(lines: Sequence[str], out_path):
    text = "".join(line + "\n" for line in lines)
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _train_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("training configuration (same keys as --config)")
    for f in fields(TrainConfig):
        flag = f.name.replace("_", "-")
        group.add_argument(f"--{flag}", f"--{f.name}", dest=f"cfg_{f.name}", default=None,
                           metavar=f.name.upper())


def resolve_config(config_path, args) -> TrainConfig:
    """Config file first, then explicit flags; unknown keys are errors."""
    values: Dict[str, str] = {}
    if config_path:
        values.update(read_key_values(_existing(config_path)))
    for f in fields(TrainConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            values[f.name] = raw
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args) -> int:
    if args.kind == "copy":
        corpus = generate_copy_corpus(args.vocab_size, args.num_pairs,
                                      (args.min_len, args.max_len), args.seed)
    else:
        corpus = generate_variation_corpus(args.vocab_size, args.num_pairs, args.variants,
                                           args.seed)
    write_parallel_corpus(corpus, args.src, args.tgt)
    print(f"wrote {len(corpus)} pairs to {args.src} and {args.tgt}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args.config, args)
    corpus = read_parallel_corpus(_existing(args.src), _existing(args.tgt))
    dev = None
    if args.dev_src or args.dev_tgt:
        if not (args.dev_src and args.dev_tgt):
            raise UsageError("--dev-src and --dev-tgt must be given together")
        dev = read_parallel_corpus(_existing(args.dev_src), _existing(args.dev_tgt))
    out = Path(args.out_dir)
    vocabs = None
    if args.resume:
        _existing(args.resume)
        vocabs = (Vocab.load(_existing(out / "src.vocab")), Vocab.load(_existing(out / "tgt.vocab")))
    out.mkdir(parents=True, exist_ok=True)
    write_key_values(out / "run.txt", {"src": args.src, "tgt": args.tgt,
                                       "dev_src": args.dev_src or "", "dev_tgt": args.dev_tgt or "",
                                       "resume": args.resume or ""})
    result = train(config, corpus, dev, out_dir=out, resume_from=args.resume, vocabs=vocabs)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"step {last['step'] + 1}: loss {last['loss']:.4f}")
    print(f"checkpoint: {out / 'final'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    model, _, src_vocab, tgt_vocab = _run_dir_model(args.model)
    beam = None if args.greedy else args.beam
    if beam is not None and beam < 1:
        raise UsageError("--beam must be at least 1")
    out = []
    for k, words in enumerate(_input_lines(args.input)):
        ids = src_vocab.encode(words)
        if not ids:
            raise ValueError(f"input line {k + 1} is blank")
        if beam is None:
            out.append(" ".join(tgt_vocab.decode(greedy_decode(model, ids, args.max_len))))
            continue
        result = beam_decode(model, ids, beam, args.max_len)
        if args.nbest:
            for rank, hyp in enumerate(result.nbest[:args.nbest], start=1):
                out.append(f"{rank}\t{hyp.score:.6f}\t{' '.join(tgt_vocab.decode(hyp.words()))}")
        else:
            out.append(" ".join(tgt_vocab.decode(result.tokens)))
    _emit(out, args.output)
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _, src_vocab, tgt_vocab = _run_dir_model(args.model)
    if model.kind == BASELINE:
        raise UsageError("sample: BASELINE models have no latent variables to sample")
    if args.num_samples < 1:
        raise UsageError("--num-samples must be positive")
    rng = substream(args.seed, LATENT)
    lines = _input_lines(args.input)
    out = []
    for k, words in enumerate(lines):
        for sample in sample_translations(model, src_vocab.encode(words), args.num_samples, rng,
                                          args.max_len):
            text = " ".join(tgt_vocab.decode(sample))
            out.append(text if len(lines) == 1 else f"{k}\t{text}")
    _emit(out, args.output)
    return EXIT_OK


def _pairs_from_files(args, src_vocab, tgt_vocab):
    corpus = read_parallel_corpus(_existing(args.src), _existing(args.tgt))
    return encode_corpus(corpus, src_vocab, tgt_vocab)


def cmd_elbo(args) -> int:
    model, infnet, src_vocab, tgt_vocab = _run_dir_model(args.model)
    if model.kind == BASELINE:
        raise UsageError("elbo: BASELINE models have no ELBO; they are scored by likelihood")
    pairs = _pairs_from_files(args, src_vocab, tgt_vocab)
    rng = substream(args.seed, EVAL)
    recon = kl = 0.0
    tokens = 0
    for start in range(0, len(pairs), args.batch_size):
        rep = sequence_elbo(model, infnet, make_batch(pairs[start:start + args.batch_size]), rng,
                            kl_weight=1.0)
        recon += rep.recon_total
        kl += rep.kl_total
        tokens += rep.n_tokens
    n = len(pairs)
    header = "sentences,tokens,recon_total,kl_total,unscaled_elbo,elbo_per_sentence,kl_per_token"
    row = [n, tokens, recon, kl, recon - kl, (recon - kl) / n, kl / tokens]
    _emit([header, ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row)],
          args.output)
    return EXIT_OK


def cmd_rate(args) -> int:
    model, infnet, src_vocab, tgt_vocab = _run_dir_model(args.model)
    if model.kind == BASELINE:
        raise UsageError("rate: BASELINE models have no latent variables")
    rep = rate_diagnostic(model, infnet, _pairs_from_files(args, src_vocab, tgt_vocab),
                          batch_size=args.batch_size, seed=args.seed)
    _emit(["sentences,tokens,rate_per_sentence,rate_per_token",
           f"{rep.n_sentences},{rep.n_tokens},{rep.rate!r},{rep.per_token_rate!r}"], args.output)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.cases or gradsuite.all_case_names()
    unknown = sorted(set(names) - set(gradsuite.all_case_names()))
    if unknown:
        raise UsageError(f"unknown gradient cases: {', '.join(unknown)}")
    seeds = range(args.seed, args.seed + args.num_seeds)
    results = gradsuite.run_suite(seeds, names, eps=args.eps, max_coords=args.max_coords or None,
                                   stencil=args.stencil)
    report = gradsuite.format_report(results, args.tol)
    _emit([report.rstrip("\n")], args.output)
    return EXIT_OK if all(r.passed(args.tol) for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stochdec", description="Latent-variable sequence-to-sequence toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write a synthetic parallel corpus")
    p.add_argument("--kind", choices=("copy", "variation"), default="variation")
    p.add_argument("--vocab-size", type=int, default=12,
                   help="copy: total vocabulary incl. reserved ids; variation: source words")
    p.add_argument("--num-pairs", type=int, default=120)
    p.add_argument("--variants", type=int, default=2, help="variation: targets per source")
    p.add_argument("--min-len", type=int, default=3, help="copy: shortest sentence")
    p.add_argument("--max-len", type=int, default=8, help="copy: longest sentence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model; writes config, metrics and checkpoints")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--dev-src")
    p.add_argument("--dev-tgt")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="key=value file; flags override its entries")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode source sentences with prior-mean latents")
    p.add_argument("--model", required=True, help="training output directory or checkpoint")
    p.add_argument("--input", help="one tokenised source sentence per line (default stdin)")
    p.add_argument("--output")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true")
    mode.add_argument("--beam", type=int, default=5)
    p.add_argument("--nbest", type=int, default=0,
                   help="print up to N hypotheses per input as rank<TAB>score<TAB>tokens; "
                        "rank restarts at 1 for each input line")
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("sample", help="translations under latents drawn from the prior")
    p.add_argument("--model", required=True)
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--num-samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_sample)

    for name, func, text in (("elbo", cmd_elbo, "unscaled ELBO of a parallel file"),
                             ("rate", cmd_rate, "dataset rate: mean KL per sentence")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--model", required=True)
        p.add_argument("--src", required=True)
        p.add_argument("--tgt", required=True)
        p.add_argument("--output")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--batch-size", type=int, default=32)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and model")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--num-seeds", type=int, default=1)
    p.add_argument("--cases", nargs="+", metavar="CASE")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--stencil", type=int, choices=(3, 5), default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=4,
                   help="coordinates probed per parameter (0 probes all)")
    p.add_argument("--output")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stochdec {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"stochdec {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, CheckpointError, FloatingPointError, OSError) as exc:
        print(f"stochdec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _entry():
    sys.exit(main())
