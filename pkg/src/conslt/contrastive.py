"""Token- and sentence-level contrastive losses with vocabulary negatives.

Each target position t contributes

    -log( exp(sim(h_t, h_t+) / tau) / sum_k exp(sim(h_t, h-_{t,k}) / tau) )

where h_t and h_t+ are decoder states for the same gold prefix under two
different dropout masks and h-_{t,k} are rows of the tied target embedding
table for K sampled negative tokens. The denominator holds only the K
negative terms; ``positive_in_denominator`` adds the positive as in standard
InfoNCE, which bounds each term below by zero. For the KL metric the similarity is the negated symmetric
KL divergence between softmax-normalised vectors, so positive pairs are
pulled together; ``literal_paper_sign`` uses the divergence itself.
"""
import dataclasses

import numpy as np

from . import tensor as T
from .corpus import SPECIAL_IDS, Vocabulary
from .errors import ConfigError, ContractError, ShapeError

SIMILARITIES = ("bidirectional_kl", "cosine")
STRATEGIES = ("batch", "batch_excl_sent", "vocab", "vocab_excl_sent")
GRANULARITIES = ("token", "sentence")


@dataclasses.dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    weight: float = 0.5
    num_negatives: int = 500
    similarity: str = "bidirectional_kl"
    strategy: str = "vocab_excl_sent"
    granularity: str = "token"
    literal_paper_sign: bool = False
    batch_mean: bool = True  # divide the summed loss by the number of sentences
    positive_in_denominator: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.weight < 0:
            raise ConfigError(f"weight must be >= 0, got {self.weight}")
        if self.num_negatives < 1:
            raise ConfigError(f"num_negatives must be >= 1, got {self.num_negatives}")
        for field, allowed in (("similarity", SIMILARITIES), ("strategy", STRATEGIES),
                               ("granularity", GRANULARITIES)):
            if getattr(self, field) not in allowed:
                raise ConfigError(f"{field}={getattr(self, field)!r} not in {allowed}")


# ---------------------------------------------------------------------------
# similarity metrics


def phi_kl(a, b):
    """Symmetric KL between softmax(a) and softmax(b) along the last axis.

    Uses KL(p||q) + KL(q||p) = sum((p - q) * (log p - log q)), evaluated from
    log-softmax so no clamping is needed. Broadcasts over leading axes.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"phi_kl: dimension mismatch {a.shape} vs {b.shape}")
    la, lb = T.log_softmax(a), T.log_softmax(b)
    return T.sum_((T.exp(la) - T.exp(lb)) * (la - lb), axis=-1) * 0.5


def cosine_sim(a, b):
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_sim: dimension mismatch {a.shape} vs {b.shape}")
    if np.any(np.all(a.data == 0, axis=-1)) or np.any(np.all(b.data == 0, axis=-1)):
        raise ContractError("cosine_sim: zero vector")
    na = T.sqrt(T.sum_(a * a, axis=-1, keepdims=True))
    nb = T.sqrt(T.sum_(b * b, axis=-1, keepdims=True))
    return T.sum_((a / na) * (b / nb), axis=-1)


def similarity(cfg, a, b):
    """Larger means more alike, except KL mode with ``literal_paper_sign``."""
    if cfg.similarity == "cosine":
        return cosine_sim(a, b)
    phi = phi_kl(a, b)
    return phi if cfg.literal_paper_sign else -phi


# ---------------------------------------------------------------------------
# losses


def token_contrastive_terms(cfg, hidden1, hidden2, negatives):
    """Per-position losses, shape (N,).

    hidden1, hidden2: (N, d) anchor / positive states.
    negatives: (N, K, d) negative embeddings, one set per position.
    """
    h1, h2, neg = T.as_tensor(hidden1), T.as_tensor(hidden2), T.as_tensor(negatives)
    if h1.shape != h2.shape or h1.ndim != 2:
        raise ShapeError(f"token loss: hidden shapes {h1.shape} and {h2.shape} must match as (N, d)")
    if neg.ndim != 3 or neg.shape[0] != h1.shape[0] or neg.shape[2] != h1.shape[1]:
        raise ShapeError(f"token loss: negatives {neg.shape} incompatible with hidden {h1.shape}")
    if neg.shape[1] == 0:
        raise ContractError("token loss: K = 0 negatives")
    n, d = h1.shape
    pos = similarity(cfg, h1, h2) * (1.0 / cfg.temperature)
    negs = similarity(cfg, h1.reshape(n, 1, d), neg) * (1.0 / cfg.temperature)
    if cfg.positive_in_denominator:
        negs = T.concat([pos.reshape(n, 1), negs], axis=1)
    return T.logsumexp(negs, axis=-1) - pos


def token_contrastive_loss(cfg, hidden1, hidden2, negatives):
    """Summed token-level loss over all N positions (pads already removed)."""
    return T.sum_(token_contrastive_terms(cfg, hidden1, hidden2, negatives))


def sentence_representation(hidden, mask):
    """Mean of decoder states over non-pad positions: (B, T, d) -> (B, d)."""
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("sentence_representation: a sentence has no unmasked position")
    return T.sum_(hidden * m[..., None], axis=1) * (1.0 / counts)


def sentence_contrastive_terms(cfg, reprs1, reprs2):
    """Per-sentence losses; the other sentences' second-pass vectors are negatives."""
    r1, r2 = T.as_tensor(reprs1), T.as_tensor(reprs2)
    if r1.shape != r2.shape or r1.ndim != 2:
        raise ShapeError(f"sentence loss: shapes {r1.shape} and {r2.shape} must match as (B, d)")
    B, d = r1.shape
    if B < 2:
        raise ContractError("sentence loss needs at least 2 sentences")
    sims = similarity(cfg, r1.reshape(B, 1, d), r2.reshape(1, B, d)) * (1.0 / cfg.temperature)
    eye = np.eye(B, dtype=bool)
    pos = T.sum_(sims * eye, axis=1)
    negs = sims if cfg.positive_in_denominator else T.masked_fill(sims, eye, -np.inf)
    return T.logsumexp(negs, axis=-1) - pos


def sentence_contrastive_loss(cfg, reprs1, reprs2):
    return T.sum_(sentence_contrastive_terms(cfg, reprs1, reprs2))


# ---------------------------------------------------------------------------
# negative sampling


@dataclasses.dataclass
class NegativeSet:
    token_ids: np.ndarray  # (K,)
    strategy: str
    with_replacement: bool = False
    embeddings: object = None  # (K, d) Tensor once gathered

    def gather(self, table):
        self.embeddings = T.embedding_lookup(table, self.token_ids)
        return self.embeddings


def _vocab_size(vocab):
    return len(vocab) if isinstance(vocab, Vocabulary) else int(vocab)


def candidate_pool(strategy, vocab, batch_sentences, anchor_index):
    """Candidate ids for one anchor sentence; batch pools keep multiplicity."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    excl = set(SPECIAL_IDS)
    if strategy.endswith("_excl_sent"):
        excl |= {int(t) for t in batch_sentences[anchor_index]}
    if strategy.startswith("vocab"):
        ids = np.arange(_vocab_size(vocab))
    else:
        ids = np.concatenate([np.asarray(s, dtype=np.int64).reshape(-1) for s in batch_sentences])
    keep = ~np.isin(ids, np.fromiter(excl, dtype=np.int64))
    return ids[keep]


class NegativeSampler:
    """Draws negatives per target token and counts pools smaller than K."""

    def __init__(self, strategy, vocab, num_negatives):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
        if num_negatives < 1:
            raise ConfigError("num_negatives must be >= 1")
        self.strategy = strategy
        self.vocab_size = _vocab_size(vocab)
        self.k = num_negatives
        self.shortfalls = 0

    def sample_ids(self, batch_sentences, anchor_index, n_tokens, rng):
        """(n_tokens, K) ids, drawn independently for each token."""
        pool = candidate_pool(self.strategy, self.vocab_size, batch_sentences, anchor_index)
        if pool.size == 0:
            raise ContractError(f"empty negative pool for strategy {self.strategy!r}, "
                                f"sentence {anchor_index}")
        if pool.size < self.k:
            self.shortfalls += n_tokens
            return pool[rng.integers(0, pool.size, size=(n_tokens, self.k))]
        keys = rng.random((n_tokens, pool.size))
        return pool[np.argsort(keys, axis=1, kind="stable")[:, :self.k]]

    def sample(self, batch_sentences, anchor_index, rng):
        ids = self.sample_ids(batch_sentences, anchor_index, 1, rng)[0]
        pool_size = candidate_pool(self.strategy, self.vocab_size, batch_sentences, anchor_index).size
        return NegativeSet(ids, self.strategy, with_replacement=pool_size < self.k)


def sample_negatives(strategy, vocab, batch_sentences, anchor_sentence_index, K, rng):
    """K negative ids for one token of sentence ``anchor_sentence_index``.

    ``batch_sentences`` holds the target id sequences of the mini-batch.
    """
    return NegativeSampler(strategy, vocab, K).sample(batch_sentences, anchor_sentence_index, rng)
