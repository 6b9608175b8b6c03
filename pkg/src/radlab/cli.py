"""Command-line entry point: ``radlab <subcommand> ...``.

Exit codes: 0 success, 2 bad arguments/config/input, 3 training diverged.
Progress goes to stderr; artifacts go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from ._io import atomic_write_text, dump_jsonl
from .checkpoint import CheckpointError
from .config import ConfigError, resolve
from .decode import GenerationConfig, generate
from .metrics import agreement_band, evaluate_corpus, fleiss_kappa, read_rater_csv
from .train import TrainingDiverged, load_model, run_ablation, train, write_report

log = logging.getLogger("radlab")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides train.seed)")
    if config:
        p.add_argument("--config", help="config file (key = value lines or JSON)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. train.epochs=5; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant on a JSONL corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _common(p)

    p = sub.add_parser("ablate", help="train and evaluate base / +SS / +RA / +SS+RA")
    p.add_argument("--train", required=True, dest="train_path")
    p.add_argument("--test", dest="test_path", help="held-out JSONL (default: split data.test_fraction off --train)")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default: the run seed)")
    p.add_argument("--workers", type=int, default=1, help="threads for variant runs")
    _common(p)

    p = sub.add_parser("generate", help="greedy responses for a JSONL of contexts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside the checkpoint)")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--max-new-tokens", type=int, default=None)
    _common(p, config=False)

    p = sub.add_parser("evaluate", help="F1 / BLEU-1/2 / DISTINCT-1/2 over a JSONL")
    p.add_argument("--input", required=True, help="JSONL with context, reference and optionally generated")
    p.add_argument("--checkpoint", help="generate missing responses with this model")
    p.add_argument("--vocab")
    p.add_argument("--out", help="write metrics.json here")
    _common(p, config=False)

    p = sub.add_parser("chat", help="read a context per line from stdin, print a response")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--max-new-tokens", type=int, default=None)
    _common(p, config=False)

    p = sub.add_parser("make-synthetic", help="write a seeded reverse-copy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--alphabet", type=int, default=20)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=8)
    _common(p, config=False)

    p = sub.add_parser("kappa", help="Fleiss' kappa of an items x categories CSV")
    p.add_argument("--input", required=True)
    _common(p, config=False)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_model_and_vocab(checkpoint, vocab_path):
    ckpt = _require_file(checkpoint, "checkpoint")
    vocab_file = _require_file(vocab_path or ckpt.parent / "vocab.txt", "vocabulary")
    params, ra_params, header = load_model(ckpt)
    vocab = D.Vocabulary.load(vocab_file)
    if len(vocab) != params.config.vocab_size:
        raise UsageError(f"vocabulary size {len(vocab)} does not match checkpoint ({params.config.vocab_size})")
    return params, ra_params, vocab


def _context_ids(turns, vocab: D.Vocabulary, max_positions: int):
    pair = D.DialoguePair.from_texts(turns, "")
    ids = vocab.encode(pair.context)
    return ids[-(max_positions - 1):]


def _read_jsonl(path: Path) -> list[dict]:
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise D.CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "context" not in rec:
                raise D.CorpusError(f"{path}: line {lineno}: missing 'context'")
            out.append(rec)
    return out


def _turns(rec) -> list[str]:
    ctx = rec["context"]
    turns = [ctx] if isinstance(ctx, str) else list(ctx)
    return list(rec.get("persona", [])) + turns


def _gen_config(cfg_max, override) -> GenerationConfig:
    return GenerationConfig(max_new_tokens=override or cfg_max)


def _prepare(corpus_path, cfg, vocab: D.Vocabulary | None = None):
    pairs = D.load_corpus(_require_file(corpus_path, "corpus"))
    if not pairs:
        raise UsageError(f"no usable pairs in {corpus_path}")
    data_cfg = cfg.build("data")
    vocab = vocab or D.build_vocab(pairs, data_cfg.vocab_size)
    mcfg = cfg.build("model", vocab_size=len(vocab))
    return pairs, vocab, mcfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .plotting import plot_training

    cfg = resolve(args.config, args.overrides, args.seed)
    tcfg = cfg.build("train")
    pairs, vocab, mcfg = _prepare(args.corpus, cfg)
    encoded = D.encode_corpus(pairs, vocab, mcfg.max_positions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    atomic_write_text(out / "config.txt", cfg.dump())
    log.info("training %s on %d pairs, vocab %d, %d epochs", tcfg.variant, len(encoded), len(vocab), tcfg.epochs)
    res = train(encoded, mcfg, tcfg, checkpoint_dir=out)
    write_report(out / "report.jsonl", res.report)
    plot_training(res.report, out / "train_curves.png")
    log.info("done in %.1fs; wrote %s", res.report.wall_time, out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    cfg = resolve(args.config, args.overrides, args.seed)
    tcfg = cfg.build("train")
    gcfg = cfg.build("gen")
    pairs, vocab, mcfg = _prepare(args.train_path, cfg)
    if args.test_path:
        test_pairs = D.load_corpus(_require_file(args.test_path, "test corpus"))
        train_pairs = pairs
    else:
        n_test = max(1, int(round(len(pairs) * cfg.build("data").test_fraction)))
        if n_test >= len(pairs):
            raise UsageError("corpus too small to hold out a test split")
        train_pairs, test_pairs = pairs[:-n_test], pairs[-n_test:]
        vocab = D.build_vocab(train_pairs, cfg.build("data").vocab_size)
        mcfg = cfg.build("model", vocab_size=len(vocab))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [tcfg.seed]
    tr = D.encode_corpus(train_pairs, vocab, mcfg.max_positions)
    te = D.encode_corpus(test_pairs, vocab, mcfg.max_positions)
    result = run_ablation(tr, te, mcfg, tcfg, seeds=seeds, gen_config=gcfg, workers=args.workers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "ablation.tsv", result.to_tsv())
    atomic_write_text(out / "ablation.json", json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "ablation.txt", result.format() + "\n")
    for (seed, name), rep in result.reports.items():
        write_report(out / "reports" / f"seed{seed}_{name.replace('+', 'plus')}.jsonl", rep)
    plot_ablation(result, out / "ablation.png")
    print(result.format(), file=sys.stderr)
    return EXIT_OK


def cmd_generate(args) -> int:
    params, ra_params, vocab = _load_model_and_vocab(args.checkpoint, args.vocab)
    gcfg = _gen_config(GenerationConfig().max_new_tokens, args.max_new_tokens)
    records = _read_jsonl(_require_file(args.input, "input"))
    out = []
    for rec in records:
        ids = _context_ids(_turns(rec), vocab, params.config.max_positions)
        gen = generate(ids, params, ra_params, gcfg)
        row = {"context": rec["context"], "generated": D.detokenize(vocab.decode(gen))}
        for key in ("reference", "response"):
            if key in rec:
                row["reference"] = rec[key]
                break
        out.append(row)
    atomic_write_text(args.output, dump_jsonl(out))
    log.info("wrote %d generations to %s", len(out), args.output)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = _read_jsonl(_require_file(args.input, "input"))
    model = None
    gens, refs = [], []
    for i, rec in enumerate(records, start=1):
        ref = rec.get("reference", rec.get("response"))
        if ref is None:
            raise UsageError(f"{args.input}: record {i} has no reference")
        if "generated" in rec:
            gen_tokens = D.tokenize(rec["generated"])
        else:
            if not args.checkpoint:
                raise UsageError(f"{args.input}: record {i} has no 'generated' and no --checkpoint was given")
            if model is None:
                model = _load_model_and_vocab(args.checkpoint, args.vocab)
            params, ra_params, vocab = model
            ids = _context_ids(_turns(rec), vocab, params.config.max_positions)
            gen_tokens = vocab.decode(generate(ids, params, ra_params))
        gens.append(gen_tokens)
        refs.append(D.tokenize(ref))
    report = evaluate_corpus(gens, refs)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "metrics.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        atomic_write_text(out / "metrics.txt", report.format() + "\n")
    print(report.format())
    return EXIT_OK


def cmd_chat(args) -> int:
    params, ra_params, vocab = _load_model_and_vocab(args.checkpoint, args.vocab)
    gcfg = _gen_config(GenerationConfig().max_new_tokens, args.max_new_tokens)
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        if not D.tokenize(text):
            print("")
            continue
        ids = _context_ids([text], vocab, params.config.max_positions)
        print(D.detokenize(vocab.decode(generate(ids, params, ra_params, gcfg))), flush=True)
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    seed = 0 if args.seed is None else args.seed
    try:
        records = D.make_copy_records(args.n, seed, args.alphabet, args.min_len, args.max_len)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    D.write_jsonl(args.out, records)
    log.info("wrote %d reverse-copy pairs to %s", len(records), args.out)
    return EXIT_OK


def cmd_kappa(args) -> int:
    matrix = read_rater_csv(_require_file(args.input, "rater matrix"))
    k = fleiss_kappa(matrix)
    print(f"items={matrix.shape[0]} kappa={k:.6f} band={agreement_band(k)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "chat": cmd_chat,
    "make-synthetic": cmd_make_synthetic,
    "kappa": cmd_kappa,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"radlab {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, D.CorpusError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"radlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
