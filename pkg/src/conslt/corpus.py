"""Word-level vocabularies, TSV parallel corpora, batching, toy corpora."""
import collections
import dataclasses
import os

import numpy as np

from .errors import ConfigError, ContractError, ParseError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
SPECIAL_IDS = frozenset(range(len(SPECIALS)))


def tokenize(line, lowercase=False):
    return (line.lower() if lowercase else line).split()


def detokenize(tokens):
    return " ".join(tokens)


class Vocabulary:
    """Token <-> id bijection; ids 0-3 are always the four specials."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t in self.stoi:
                raise ContractError(f"duplicate vocabulary entry {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens):
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids):
        """Tokens up to the first ``<eos>``; ``<pad>``/``<bos>`` are dropped, ``<unk>`` kept."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i not in (PAD, BOS):
                out.append(self.itos[i])
        return out

    def content_ids(self):
        """Ids of every non-special token."""
        return np.arange(len(SPECIALS), len(self.itos))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if tuple(lines[:len(SPECIALS)]) != SPECIALS:
            raise ParseError(f"first lines must be {', '.join(SPECIALS)}", path)
        return cls(lines[len(SPECIALS):])


def build_vocab(corpus_lines, min_freq=1, lowercase=False):
    """Vocabulary of tokens seen at least ``min_freq`` times.

    Order: descending frequency, ties broken lexicographically.
    """
    corpus_lines = list(corpus_lines)
    if not corpus_lines:
        raise ContractError("build_vocab: empty corpus")
    counts = collections.Counter(t for line in corpus_lines for t in tokenize(line, lowercase))
    for s in SPECIALS:
        counts.pop(s, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclasses.dataclass
class ParallelExample:
    source: object  # list of ids, or (frames, d_feat) array
    target: list
    sentence_token_set: frozenset = None

    def __post_init__(self):
        if len(self.target) < 2:
            raise ContractError("target needs at least <bos> and <eos>")
        if self.sentence_token_set is None:
            self.sentence_token_set = frozenset(self.target) - SPECIAL_IDS


def make_example(src_ids, tgt_ids):
    return ParallelExample(list(src_ids), [BOS] + list(tgt_ids) + [EOS])


def read_tsv_pairs(path, lowercase=False):
    """(source text, target text) pairs from a tab-separated file."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError("expected source<TAB>target", path, lineno)
            src, tgt = line.split("\t", 1)
            if "\t" in tgt:
                raise ParseError("more than one tab", path, lineno)
            if not src.strip() or not tgt.strip():
                raise ParseError("empty source or target side", path, lineno)
            if lowercase:
                src, tgt = src.lower(), tgt.lower()
            pairs.append((src, tgt))
    return pairs


def load_tsv(path, vocab_src, vocab_tgt, lowercase=False):
    return [make_example(vocab_src.encode(s.split()), vocab_tgt.encode(t.split()))
            for s, t in read_tsv_pairs(path, lowercase)]


def load_feature_tsv(path, vocab_tgt, lowercase=False):
    """Examples whose first column names a sidecar feature file.

    Each sidecar is a checkpoint container holding one array ``features`` of
    shape (frames, d_feat); relative paths resolve against the TSV's folder.
    """
    from .checkpoint import load_arrays

    base = os.path.dirname(os.path.abspath(path))
    out = []
    for src, tgt in read_tsv_pairs(path, lowercase):
        arrays, _ = load_arrays(os.path.join(base, src.strip()))
        feats = arrays["features"]
        if feats.ndim != 2:
            raise ParseError(f"features must be 2-D, got shape {feats.shape}", src)
        out.append(ParallelExample(feats, [BOS] + vocab_tgt.encode(tgt.split()) + [EOS]))
    return out


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclasses.dataclass
class SyntheticCorpus:
    task: str
    lines: list  # "source\ttarget"
    mapping: dict  # source symbol -> target symbol

    def pairs(self):
        return [tuple(line.split("\t")) for line in self.lines]

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.lines) + "\n")


SYNTHETIC_TASKS = ("copy", "reverse", "mapped")


def make_synthetic_corpus(task, vocab_size, num_examples, len_range, rng):
    """Toy translation pairs over symbols ``t0 .. t{vocab_size-1}``.

    ``copy`` repeats the source, ``reverse`` reverses it, and ``mapped``
    rewrites every symbol through a random bijection drawn from ``rng``.
    """
    if task not in SYNTHETIC_TASKS:
        raise ConfigError(f"unknown synthetic task {task!r}; choose from {SYNTHETIC_TASKS}")
    lo, hi = len_range
    if vocab_size < 5 or num_examples < 1 or not 1 <= lo <= hi:
        raise ConfigError(f"bad synthetic corpus parameters: vocab_size={vocab_size}, "
                          f"num_examples={num_examples}, len_range={len_range}")
    symbols = [f"t{i}" for i in range(vocab_size)]
    if task == "mapped":
        perm = rng.permutation(vocab_size)
        mapping = {symbols[i]: symbols[int(perm[i])] for i in range(vocab_size)}
    else:
        mapping = {s: s for s in symbols}
    lines = []
    for _ in range(num_examples):
        n = int(rng.integers(lo, hi + 1))
        src = [symbols[int(i)] for i in rng.integers(0, vocab_size, size=n)]
        tgt = src[::-1] if task == "reverse" else [mapping[s] for s in src]
        lines.append(f"{' '.join(src)}\t{' '.join(tgt)}")
    return SyntheticCorpus(task, lines, mapping)


# ---------------------------------------------------------------------------
# batching


@dataclasses.dataclass
class Batch:
    src: np.ndarray  # (B, S) ids or (B, S, d_feat) features
    src_mask: np.ndarray  # (B, S) bool
    tgt: np.ndarray  # (B, T) ids incl. <bos>/<eos>, PAD-filled
    tgt_mask: np.ndarray  # (B, T) bool
    token_sets: list
    indices: np.ndarray

    def __len__(self):
        return self.tgt.shape[0]

    @property
    def tgt_in(self):
        return self.tgt[:, :-1]

    @property
    def tgt_out(self):
        return self.tgt[:, 1:]

    @property
    def out_mask(self):
        return self.tgt_mask[:, 1:]


def collate(examples, indices=None):
    B = len(examples)
    S = max(len(e.source) for e in examples)
    Tt = max(len(e.target) for e in examples)
    first = examples[0].source
    if isinstance(first, np.ndarray) and first.ndim == 2:
        src = np.zeros((B, S, first.shape[1]))
    else:
        src = np.full((B, S), PAD, dtype=np.int64)
    src_mask = np.zeros((B, S), dtype=bool)
    tgt = np.full((B, Tt), PAD, dtype=np.int64)
    tgt_mask = np.zeros((B, Tt), dtype=bool)
    for i, e in enumerate(examples):
        n, m = len(e.source), len(e.target)
        src[i, :n] = e.source
        src_mask[i, :n] = True
        tgt[i, :m] = e.target
        tgt_mask[i, :m] = True
    idx = np.arange(B) if indices is None else np.asarray(indices)
    return Batch(src, src_mask, tgt, tgt_mask, [e.sentence_token_set for e in examples], idx)


def batch_iter(examples, batch_size, shuffle=False, rng=None):
    """One epoch of padded batches; every example appears exactly once."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(examples)) if shuffle else np.arange(len(examples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield collate([examples[i] for i in idx], idx)
