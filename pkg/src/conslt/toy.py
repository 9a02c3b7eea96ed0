"""Desk-scale synthetic setup: corpus splits plus hyperparameters that train on a laptop CPU.

The settings below were picked by a small grid on the copy task (vocab 50,
500 train / 100 dev, lengths 3..8). Two heads, a wide feed-forward layer,
light dropout and label smoothing 0.1 were what made the model generalize
positional copying to unseen dev sentences instead of memorizing the
training pairs.
"""
import dataclasses
import os

from . import tensor as T
from .config import build
from .corpus import build_vocab, make_example, make_synthetic_corpus

TOY_SETTINGS = {
    "num_encoder_layers": 2,
    "num_decoder_layers": 2,
    "d_model": 64,
    "num_heads": 2,
    "d_ff": 256,
    "dropout_rate": 0.05,
    "max_positions": 32,
    "learning_rate": 2e-3,
    "batch_size": 8,
    "label_smoothing": 0.1,
    "max_epochs": 30,
    "max_decode_len": 20,
    "cl_weight": 0.5,
    "cl_num_negatives": 20,
    "cl_temperature": 0.1,
}


@dataclasses.dataclass
class ToySplits:
    train: list  # ParallelExample
    dev: list
    test: list
    vocab_src: object
    vocab_tgt: object
    mapping: dict


def toy_lines(task="copy", vocab_size=50, n_train=500, n_dev=100, n_test=100, len_range=(3, 8), seed=1234):
    """``{"train": lines, "dev": lines, "test": lines}`` and the symbol mapping."""
    corp = make_synthetic_corpus(task, vocab_size, n_train + n_dev + n_test, len_range, T.RngState(seed))
    lines = corp.lines
    return {"train": lines[:n_train], "dev": lines[n_train:n_train + n_dev],
            "test": lines[n_train + n_dev:]}, corp.mapping


def toy_splits(task="copy", **kw):
    parts, mapping = toy_lines(task, **kw)
    pairs = {k: [tuple(line.split("\t")) for line in v] for k, v in parts.items()}
    vs = build_vocab([s for s, _ in pairs["train"]])
    vt = build_vocab([t for _, t in pairs["train"]])

    def encode(ps):
        return [make_example(vs.encode(s.split()), vt.encode(t.split())) for s, t in ps]
    return ToySplits(encode(pairs["train"]), encode(pairs["dev"]), encode(pairs["test"]), vs, vt, mapping)


def toy_config(alpha=0.5, **overrides):
    """RunConfig with the toy settings; ``alpha=0`` turns contrastive training off."""
    values = dict(TOY_SETTINGS, cl_weight=alpha, enable_cl=alpha > 0)
    values.update(overrides)
    return build(values)


def write_toy_corpus(out_dir, task="copy", alpha=0.5, **kw):
    """Write train/dev/test TSVs and a ``toy.conf`` pointing at them; returns the config path."""
    os.makedirs(out_dir, exist_ok=True)
    parts, _ = toy_lines(task, **kw)
    for name, lines in parts.items():
        with open(os.path.join(out_dir, f"{name}.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    cfg = toy_config(alpha)
    text = cfg.dumps() + "train_path = train.tsv\ndev_path = dev.tsv\ntest_path = test.tsv\n"
    path = os.path.join(out_dir, "toy.conf")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path



def train_toy(task="copy", alpha=0.5, splits=None, on_epoch=None, **overrides):
    """Build and fit a toy model; returns ``(model restored to best, FitResult, splits)``."""
    from .model import Transformer
    from .train import fit, restore

    splits = splits or toy_splits(task)
    cfg = toy_config(alpha, **overrides)
    mcfg = cfg.model_config(len(splits.vocab_src), len(splits.vocab_tgt))
    model = Transformer(mcfg, rng=T.RngState(cfg.train.seed).substream(0))
    result = fit(model, splits.train, splits.dev, cfg.train, splits.vocab_tgt, on_epoch=on_epoch)
    restore(model, result.best_params)
    return model, result, splits
