"""``conslt`` command line: train, translate, evaluate, export-embeddings, ablate, synth.

Exit codes: 0 success, 1 contract violation, 2 bad config or usage, 3 file
or IO problem, 4 non-finite training loss, 5 checkpoint/vocabulary mismatch.
"""
import argparse
import concurrent.futures
import csv
import datetime
import io
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import toy
from .config import load_config, with_overrides
from .corpus import Vocabulary, build_vocab, load_feature_tsv, load_tsv, make_example, read_tsv_pairs
from .errors import ConfigError, ContractError, NonFiniteLossError, ParseError, VocabMismatchError
from .metrics import evaluate
from .model import SourceInput, Transformer, beam_decode, load_model, save_model
from .tensor import RngState
from .train import fit, references_of, restore, translate_examples, write_history

EXIT_OK, EXIT_CONTRACT, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_VOCAB = 0, 1, 2, 3, 4, 5

TABLE3 = [
    ("baseline (w/o CL)", None),
    ("w/ S-CL + cos", dict(cl_granularity="sentence", cl_similarity="cosine")),
    ("w/ T-CL + cos", dict(cl_granularity="token", cl_similarity="cosine")),
    ("w/ S-CL + KL", dict(cl_granularity="sentence", cl_similarity="bidirectional_kl")),
    ("w/ T-CL + KL", dict(cl_granularity="token", cl_similarity="bidirectional_kl")),
]
TABLE4 = [
    ("Batch", dict(cl_strategy="batch")),
    ("Batch\\Sent", dict(cl_strategy="batch_excl_sent")),
    ("Vocab", dict(cl_strategy="vocab")),
    ("Vocab\\Sent", dict(cl_strategy="vocab_excl_sent")),
]
METRIC_HEADER = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE")


# ---------------------------------------------------------------------------
# shared helpers


def load_data(cfg):
    """``({split: examples or None}, vocab_src, vocab_tgt)``; vocabularies come from train."""
    if not cfg.train_path or not cfg.dev_path:
        raise ConfigError("train_path and dev_path are required")
    for key in ("train_path", "dev_path", "test_path"):
        path = getattr(cfg, key)
        if path and not os.path.isfile(path):
            raise FileNotFoundError(f"{key}: no such file {path}")
    pairs = read_tsv_pairs(cfg.train_path, cfg.lowercase)
    vt = build_vocab([t for _, t in pairs], cfg.min_freq)
    vs = None
    if cfg.source_kind == "tokens":
        vs = build_vocab([s for s, _ in pairs], cfg.min_freq)
    splits = {}
    for name in ("train", "dev", "test"):
        path = getattr(cfg, name + "_path")
        if not path:
            splits[name] = None
        elif vs is None:
            splits[name] = load_feature_tsv(path, vt, cfg.lowercase)
        else:
            splits[name] = load_tsv(path, vs, vt, cfg.lowercase)
    return splits, vs, vt


def build_model(cfg, splits, vs, vt):
    feat_dim = 0
    if cfg.source_kind == "features":
        feat_dim = splits["train"][0].source.shape[1]
    mcfg = cfg.model_config(len(vs) if vs is not None else 0, len(vt), feat_dim)
    return Transformer(mcfg, rng=RngState(cfg.train.seed).substream(0))


def run_training(cfg, out_dir, data=None):
    """Fit one configuration and write its four artifacts into ``out_dir``.

    Returns ``(model restored to best, vocab_src, vocab_tgt, splits)``.
    """
    splits, vs, vt = data if data is not None else load_data(cfg)
    model = build_model(cfg, splits, vs, vt)
    result = fit(model, splits["train"], splits["dev"], cfg.train, vt)
    save_model(os.path.join(out_dir, "final.ckpt"), model, vs, vt, {"epochs": result.epochs_run})
    restore(model, result.best_params)
    save_model(os.path.join(out_dir, "best.ckpt"), model, vs, vt,
               {"epochs": result.epochs_run, "best_dev_bleu4": result.best_score})
    write_history(os.path.join(out_dir, "history.jsonl"), result.history)
    cfg.write(os.path.join(out_dir, "config.resolved"))
    return model, vs, vt, splits


def commit_dir(tmp_dir, out_dir):
    """Move a fully written temp directory into place (no partial output on failure)."""
    if os.path.exists(out_dir):
        if os.listdir(out_dir):
            raise FileExistsError(f"output directory {out_dir} exists and is not empty")
        os.rmdir(out_dir)
    umask = os.umask(0)
    os.umask(umask)
    os.chmod(tmp_dir, 0o777 & ~umask)  # mkdtemp creates 0700
    shutil.move(tmp_dir, out_dir)


def staging_dir(out_dir):
    parent = os.path.dirname(os.path.abspath(out_dir))
    os.makedirs(parent, exist_ok=True)
    return tempfile.mkdtemp(prefix=".staging-", dir=parent)


def default_out_dir(cfg, kind):
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    return os.path.join(cfg.out_dir or "runs", f"{kind}-{stamp}")


def resolve_config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    return cfg


def decode_all(model, examples, vt, beam, max_len, alpha=1.0):
    if beam <= 1:
        return translate_examples(model, examples, vt, max_len)
    out = []
    for e in examples:
        src = SourceInput(feature_vectors=e.source) if isinstance(e.source, np.ndarray) \
            else SourceInput(token_ids=e.source)
        out.append(" ".join(vt.decode(beam_decode(model, src, beam, max_len, alpha))))
    return out


def load_checkpoint(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such checkpoint {path}")
    model, meta = load_model(path)
    if "vocab_tgt" not in meta:
        raise VocabMismatchError(f"{path} carries no target vocabulary")
    vs = Vocabulary(meta["vocab_src"][4:]) if "vocab_src" in meta else None
    vt = Vocabulary(meta["vocab_tgt"][4:])
    return model, vs, vt


def check_vocab_against(cfg, vs, vt):
    """Raise if the config's training data would build different vocabularies."""
    if not cfg.train_path or not os.path.isfile(cfg.train_path):
        return
    pairs = read_tsv_pairs(cfg.train_path, cfg.lowercase)
    if build_vocab([t for _, t in pairs], cfg.min_freq) != vt:
        raise VocabMismatchError(f"target vocabulary of {cfg.train_path} differs from the checkpoint's")
    if vs is not None and build_vocab([s for s, _ in pairs], cfg.min_freq) != vs:
        raise VocabMismatchError(f"source vocabulary of {cfg.train_path} differs from the checkpoint's")


def format_row(values):
    return "\t".join(f"{v:.2f}" for v in values)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = resolve_config(args)
    data = load_data(cfg)  # fail before anything is created on disk
    out_dir = args.out or default_out_dir(cfg, "train")
    tmp = staging_dir(out_dir)
    try:
        run_training(cfg, tmp, data)
        commit_dir(tmp, out_dir)
    finally:
        if os.path.isdir(tmp):
            shutil.rmtree(tmp)
    print(out_dir)
    return EXIT_OK


def cmd_translate(args):
    model, vs, vt = load_checkpoint(args.checkpoint)
    if vs is None:
        raise ConfigError("translate reads gloss text; feature-input checkpoints need evaluate")
    fh = open(args.input, encoding="utf-8") if args.input else sys.stdin
    try:
        lines = [line.rstrip("\r\n") for line in fh]
    finally:
        if fh is not sys.stdin:
            fh.close()
    beam = 1 if args.greedy else args.beam
    out = []
    examples = [make_example(vs.encode(line.split()), []) for line in lines if line.strip()]
    hyps = iter(decode_all(model, examples, vt, beam, args.max_len))
    for line in lines:
        out.append(next(hyps) if line.strip() else "")
    text = "\n".join(out) + ("\n" if out else "")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args):
    model, vs, vt = load_checkpoint(args.checkpoint)
    test_path = args.test
    if args.config:
        cfg = load_config(args.config)
        test_path = test_path or cfg.test_path
        check_vocab_against(cfg, vs, vt)
    if not test_path:
        raise ConfigError("evaluate needs --test or a config with test_path")
    if not os.path.isfile(test_path):
        raise FileNotFoundError(f"no such file {test_path}")
    if vs is None:
        examples = load_feature_tsv(test_path, vt, args.lowercase)
        if examples and examples[0].source.shape[1] != model.cfg.src_feature_dim:
            raise VocabMismatchError(f"features have dim {examples[0].source.shape[1]}, "
                                     f"checkpoint expects {model.cfg.src_feature_dim}")
    else:
        examples = load_tsv(test_path, vs, vt, args.lowercase)
    beam = 1 if args.greedy else args.beam
    hyps = decode_all(model, examples, vt, beam, args.max_len, args.length_penalty)
    refs = references_of(examples, vt)
    report = evaluate(hyps, refs)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "hypotheses.txt")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(hyps) + "\n")
    print("\t".join(METRIC_HEADER))
    print(format_row(report.row()))
    return EXIT_OK


def embedding_csv(model, vt):
    """CSV text of the non-special target embeddings, plus their mean pairwise cosine."""
    table = model.params["tgt_embedding"].data[4:]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["token"] + [f"dim_{i}" for i in range(table.shape[1])])
    for tok, row in zip(vt.itos[4:], table):
        writer.writerow([tok] + [format(float(x), ".17g") for x in row])
    return buf.getvalue(), mean_pairwise_cosine(table)


def mean_pairwise_cosine(table):
    n = len(table)
    if n < 2:
        return float("nan")
    unit = table / np.linalg.norm(table, axis=1, keepdims=True)
    sims = unit @ unit.T
    return float((sims.sum() - np.trace(sims)) / (n * (n - 1)))


def cmd_export_embeddings(args):
    model, _, vt = load_checkpoint(args.checkpoint)
    text, mean_cos = embedding_csv(model, vt)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    print(f"rows={len(vt) - 4} dim={model.cfg.d_model} mean_pairwise_cosine={mean_cos:.6f}")
    return EXIT_OK


def ablation_runs(cfg):
    """``[(table, label, config)]`` for the requested tables, sharing one seed."""
    runs = []
    if "3" in cfg.ablate_tables:
        for label, changes in TABLE3:
            if changes is None:
                runs.append(("3", label, with_overrides(cfg, enable_cl=False)))
            else:
                runs.append(("3", label, with_overrides(cfg, enable_cl=True, **changes)))
    if "4" in cfg.ablate_tables:
        for label, changes in TABLE4:
            runs.append(("4", label, with_overrides(cfg, enable_cl=True, cl_granularity="token",
                                                    cl_similarity="bidirectional_kl", **changes)))
    return runs


def _ablate_one(job):
    index, cfg, run_dir = job
    os.makedirs(run_dir)
    model, vs, vt, splits = run_training(cfg, run_dir)
    examples = splits["test"] or splits["dev"]
    hyps = decode_all(model, examples, vt, cfg.beam_size, cfg.train.max_decode_len, cfg.length_penalty)
    report = evaluate(hyps, references_of(examples, vt))
    return index, [report.bleu1, report.bleu2, report.bleu3, report.bleu4]


def ablation_markdown(title, rows):
    lines = [f"### {title}", "", "| | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 |", "|---|---|---|---|---|"]
    for label, scores in rows:
        lines.append("| " + label + " | " + " | ".join(f"{s:.2f}" for s in scores) + " |")
    return "\n".join(lines) + "\n"


def worker_count(n_jobs):
    cap = os.environ.get("CONSLT_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = int(cap)
        except ValueError:
            raise ConfigError(f"CONSLT_THREADS must be an integer, got {cap!r}") from None
        if limit < 1:
            raise ConfigError("CONSLT_THREADS must be >= 1")
    return max(1, min(limit, n_jobs))


def cmd_ablate(args):
    cfg = resolve_config(args)
    load_data(cfg)
    out_dir = args.out or default_out_dir(cfg, "ablate")
    tmp = staging_dir(out_dir)
    try:
        runs = ablation_runs(cfg)
        jobs = [(i, c, os.path.join(tmp, f"table{t}-{i:02d}")) for i, (t, _, c) in enumerate(runs)]
        workers = worker_count(len(jobs))
        scores = {}
        if workers == 1:
            for job in jobs:
                i, s = _ablate_one(job)
                scores[i] = s
        else:
            with concurrent.futures.ProcessPoolExecutor(workers) as pool:
                for i, s in pool.map(_ablate_one, jobs):
                    scores[i] = s
        report = ""
        for table, title in (("3", "Table 3: contrastive variants"), ("4", "Table 4: negative sampling")):
            rows = [(label, scores[i]) for i, (t, label, _) in enumerate(runs) if t == table]
            if rows:
                report += ablation_markdown(title, rows) + "\n"
        with open(os.path.join(tmp, "ablation.md"), "w", encoding="utf-8") as fh:
            fh.write(report)
        cfg.write(os.path.join(tmp, "config.resolved"))
        commit_dir(tmp, out_dir)
    finally:
        if os.path.isdir(tmp):
            shutil.rmtree(tmp)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_synth(args):
    if os.path.exists(args.out) and os.listdir(args.out):
        raise FileExistsError(f"output directory {args.out} exists and is not empty")
    path = toy.write_toy_corpus(args.out, task=args.task, alpha=args.alpha, vocab_size=args.vocab_size,
                                n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test,
                                len_range=(args.min_len, args.max_len), seed=args.seed)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="conslt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def decoding(sp):
        sp.add_argument("--beam", type=int, default=1, help="beam size (1 = greedy)")
        sp.add_argument("--greedy", action="store_true", help="force greedy decoding")
        sp.add_argument("--max-len", type=int, default=40)

    sp = sub.add_parser("train", help="fit a model from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="output directory (default: timestamped under out_dir)")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("translate", help="decode gloss lines with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", help="one source sentence per line (default: stdin)")
    sp.add_argument("--out", help="hypothesis file (default: stdout)")
    decoding(sp)
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a TSV test set")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--test", help="test TSV (default: test_path from --config)")
    sp.add_argument("--config")
    sp.add_argument("--out", help="hypothesis file (default: next to the checkpoint)")
    sp.add_argument("--lowercase", action="store_true")
    sp.add_argument("--length-penalty", type=float, default=1.0)
    decoding(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("export-embeddings", help="write the target embedding table as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("ablate", help="run the contrastive-variant and sampling-strategy grids")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", help="write a synthetic toy corpus and matching config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--task", default="copy", choices=("copy", "reverse", "mapped"))
    sp.add_argument("--alpha", type=float, default=0.5, help="contrastive weight in the written config")
    sp.add_argument("--vocab-size", type=int, default=50)
    sp.add_argument("--n-train", type=int, default=500)
    sp.add_argument("--n-dev", type=int, default=100)
    sp.add_argument("--n-test", type=int, default=100)
    sp.add_argument("--min-len", type=int, default=3)
    sp.add_argument("--max-len", type=int, default=8)
    sp.add_argument("--seed", type=int, default=1234)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except VocabMismatchError as exc:
        print(f"error: vocabulary mismatch: {exc}", file=sys.stderr)
        return EXIT_VOCAB
    except (ParseError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
