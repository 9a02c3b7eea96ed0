"""Encoder-decoder transformer with a tied decoder embedding / output matrix.

The source side takes either token ids (gloss input) or a sequence of
precomputed feature vectors passed through a linear projection (video
features). The decoder's ``hidden`` output is the final decoder state
before the output projection, and ``logits = hidden @ tgt_embedding.T``
reuses the very same ``Tensor`` that the decoder input lookup reads.
"""
import dataclasses
import math

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .corpus import BOS, EOS, PAD
from .errors import ConfigError, ContractError, VocabMismatchError

NEG_INF = -1e9


@dataclasses.dataclass
class ModelConfig:
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    dropout_rate: float = 0.1
    max_positions: int = 128
    src_feature_dim: int = 0  # >0 selects the feature-vector source path
    position_encoding: str = "sinusoidal"  # or "learned"
    norm_style: str = "pre"  # or "post"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("num_encoder_layers", "num_decoder_layers", "d_model", "num_heads",
                     "d_ff", "max_positions", "tgt_vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.src_feature_dim <= 0 and self.src_vocab_size < 1:
            raise ConfigError("token sources need src_vocab_size >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.position_encoding not in ("sinusoidal", "learned"):
            raise ConfigError(f"unknown position_encoding {self.position_encoding!r}")
        if self.norm_style not in ("pre", "post"):
            raise ConfigError(f"unknown norm_style {self.norm_style!r}")

    @classmethod
    def sign2text(cls, tgt_vocab_size, src_feature_dim=1024, **kw):
        """End-to-end preset: 3+3 layers, 512 units, 8 heads, dropout 0.4."""
        base = dict(num_encoder_layers=3, num_decoder_layers=3, d_model=512, num_heads=8,
                    d_ff=2048, dropout_rate=0.4, max_positions=512)
        base.update(kw)
        return cls(tgt_vocab_size=tgt_vocab_size, src_feature_dim=src_feature_dim, **base)

    @classmethod
    def gloss2text(cls, src_vocab_size, tgt_vocab_size, **kw):
        """Cascaded preset: 2+2 layers, 512 units, 8 heads, dropout 0.3."""
        base = dict(num_encoder_layers=2, num_decoder_layers=2, d_model=512, num_heads=8,
                    d_ff=2048, dropout_rate=0.3, max_positions=256)
        base.update(kw)
        return cls(src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size, **base)


@dataclasses.dataclass
class SourceInput:
    """One source sequence: gloss ids or a (frames x d_feat) feature matrix."""

    token_ids: list = None
    feature_vectors: np.ndarray = None

    def __post_init__(self):
        if (self.token_ids is None) == (self.feature_vectors is None):
            raise ContractError("SourceInput needs exactly one of token_ids / feature_vectors")

    def __len__(self):
        return len(self.token_ids) if self.token_ids is not None else len(self.feature_vectors)

    def as_batch(self):
        """(src, src_mask) arrays with a leading batch axis of 1."""
        if self.token_ids is not None:
            src = np.asarray(self.token_ids, dtype=np.int64)[None]
        else:
            src = np.asarray(self.feature_vectors, dtype=np.float64)[None]
        return src, np.ones(src.shape[:2], dtype=bool)


def sinusoidal_table(n_pos, d_model):
    pos = np.arange(n_pos)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _xavier(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.random((fan_in, fan_out)) * 2 * lim - lim


def init_params(cfg, rng):
    """Fresh parameters as an ordered ``{name: Tensor}`` dict."""
    d, f = cfg.d_model, cfg.d_ff
    p = {}

    def linear(name, n_in, n_out):
        p[name + ".w"] = _xavier(rng, n_in, n_out)
        p[name + ".b"] = np.zeros(n_out)

    def norm(name):
        p[name + ".g"] = np.ones(d)
        p[name + ".b"] = np.zeros(d)

    def attention(name):
        for part in ("q", "k", "v", "o"):
            linear(f"{name}.{part}", d, d)

    if cfg.src_feature_dim > 0:
        linear("src_proj", cfg.src_feature_dim, d)
    else:
        p["src_embedding"] = rng.normal(d ** -0.5, (cfg.src_vocab_size, d))
    p["tgt_embedding"] = rng.normal(d ** -0.5, (cfg.tgt_vocab_size, d))
    if cfg.position_encoding == "learned":
        p["pos_embedding"] = rng.normal(0.02, (cfg.max_positions, d))
    for i in range(cfg.num_encoder_layers):
        attention(f"enc.{i}.self")
        norm(f"enc.{i}.ln1")
        linear(f"enc.{i}.ff1", d, f)
        linear(f"enc.{i}.ff2", f, d)
        norm(f"enc.{i}.ln2")
    for i in range(cfg.num_decoder_layers):
        attention(f"dec.{i}.self")
        norm(f"dec.{i}.ln1")
        attention(f"dec.{i}.cross")
        norm(f"dec.{i}.ln2")
        linear(f"dec.{i}.ff1", d, f)
        linear(f"dec.{i}.ff2", f, d)
        norm(f"dec.{i}.ln3")
    if cfg.norm_style == "pre":
        norm("enc.final_ln")
        norm("dec.final_ln")
    return {k: T.Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class Transformer:
    """Parameters plus the forward computations that read them."""

    def __init__(self, cfg, params=None, rng=None):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, rng if rng is not None else T.RngState(0))
        self.params = params
        self._pos = sinusoidal_table(cfg.max_positions, cfg.d_model)

    # -- building blocks ------------------------------------------------
    def _linear(self, name, x):
        return x @ self.params[name + ".w"] + self.params[name + ".b"]

    def _norm(self, name, x):
        return T.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _drop(self, x, rng, training):
        return T.dropout(x, self.cfg.dropout_rate, rng, training)

    def _attention(self, name, q_in, kv_in, keep, rng, training):
        """Multi-head attention; ``keep`` broadcasts to (B, 1, Tq, Tk)."""
        B, Tq, d = q_in.shape
        Tk = kv_in.shape[1]
        h = self.cfg.num_heads
        dh = d // h

        def heads(x, n):
            return x.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        q = heads(self._linear(name + ".q", q_in), Tq)
        k = heads(self._linear(name + ".k", kv_in), Tk)
        v = heads(self._linear(name + ".v", kv_in), Tk)
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        scores = T.masked_fill(scores, ~keep, NEG_INF)
        attn = self._drop(T.softmax(scores, axis=-1), rng, training)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self._linear(name + ".o", ctx)

    def _ffn(self, name, x, rng, training):
        hid = self._drop(T.relu(self._linear(name + ".ff1", x)), rng, training)
        return self._linear(name + ".ff2", hid)

    def _sublayer(self, ln, x, fn, rng, training):
        if self.cfg.norm_style == "pre":
            return x + self._drop(fn(self._norm(ln, x)), rng, training)
        return self._norm(ln, x + self._drop(fn(x), rng, training))

    def _positions(self, n):
        if n > self.cfg.max_positions:
            raise ContractError(f"sequence length {n} exceeds max_positions={self.cfg.max_positions}")
        if self.cfg.position_encoding == "learned":
            return T.index_select(self.params["pos_embedding"], np.arange(n))
        return T.Tensor(self._pos[:n])

    # -- public forward passes -------------------------------------------
    def encode(self, src, src_mask=None, rng=None, training=False):
        """Encoder states (B, S, d) for ids (B, S) or features (B, S, d_feat).

        A ``SourceInput`` is accepted too, in which case the result is (S, d).
        """
        single = isinstance(src, SourceInput)
        if single:
            src, src_mask = src.as_batch()
        src = np.asarray(src)
        if src_mask is None:
            src_mask = np.ones(src.shape[:2], dtype=bool)
        S = src.shape[1]
        pos = self._positions(S)
        if self.cfg.src_feature_dim > 0:
            if src.ndim != 3 or src.shape[2] != self.cfg.src_feature_dim:
                raise ContractError(f"expected features (B, S, {self.cfg.src_feature_dim}), got {src.shape}")
            x = self._linear("src_proj", T.Tensor(src.astype(np.float64))) + pos
        else:
            if src.ndim != 2:
                raise ContractError(f"expected token ids (B, S), got shape {src.shape}")
            x = T.embedding_lookup(self.params["src_embedding"], src) * math.sqrt(self.cfg.d_model) + pos
        x = self._drop(x, rng, training)
        keep = np.asarray(src_mask, dtype=bool)[:, None, None, :]
        for i in range(self.cfg.num_encoder_layers):
            x = self._sublayer(f"enc.{i}.ln1", x,
                               lambda y, i=i: self._attention(f"enc.{i}.self", y, y, keep, rng, training),
                               rng, training)
            x = self._sublayer(f"enc.{i}.ln2", x,
                               lambda y, i=i: self._ffn(f"enc.{i}", y, rng, training), rng, training)
        if self.cfg.norm_style == "pre":
            x = self._norm("enc.final_ln", x)
        return x.reshape(S, self.cfg.d_model) if single else x

    def decode(self, memory, tgt_prefix, src_mask=None, rng=None, training=False):
        """Teacher-forced decoder pass.

        Returns ``(hidden, logits)`` with shapes (B, T, d) and (B, T, V); a 2-D
        ``memory`` with a 1-D prefix gives unbatched (T, d) and (T, V).
        """
        tgt = np.asarray(tgt_prefix, dtype=np.int64)
        single = tgt.ndim == 1
        if single:
            tgt = tgt[None]
            memory = memory.reshape(1, *memory.shape)
        if tgt.shape[1] == 0:
            raise ContractError("decode needs a non-empty target prefix")
        B, Tt = tgt.shape
        if src_mask is None:
            src_mask = np.ones(memory.shape[:2], dtype=bool)
        x = T.embedding_lookup(self.params["tgt_embedding"], tgt) * math.sqrt(self.cfg.d_model)
        x = self._drop(x + self._positions(Tt), rng, training)
        causal = np.tril(np.ones((Tt, Tt), dtype=bool))[None, None]
        self_keep = causal & (tgt != PAD)[:, None, None, :]
        cross_keep = np.asarray(src_mask, dtype=bool)[:, None, None, :]
        for i in range(self.cfg.num_decoder_layers):
            x = self._sublayer(f"dec.{i}.ln1", x,
                               lambda y, i=i: self._attention(f"dec.{i}.self", y, y, self_keep, rng, training),
                               rng, training)
            x = self._sublayer(f"dec.{i}.ln2", x,
                               lambda y, i=i: self._attention(f"dec.{i}.cross", y, memory, cross_keep, rng, training),
                               rng, training)
            x = self._sublayer(f"dec.{i}.ln3", x,
                               lambda y, i=i: self._ffn(f"dec.{i}", y, rng, training), rng, training)
        if self.cfg.norm_style == "pre":
            x = self._norm("dec.final_ln", x)
        logits = self.project(x)
        if single:
            return x.reshape(Tt, -1), logits.reshape(Tt, -1)
        return x, logits

    def project(self, hidden):
        """Output logits through the tied target embedding."""
        return hidden @ T.transpose(self.params["tgt_embedding"])

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.size for p in self.params.values())


# ---------------------------------------------------------------------------
# decoding


def _next_logprobs(model, memory, src_mask, prefixes):
    """Log-probabilities of the next token for each prefix row, pad/bos excluded."""
    _, logits = model.decode(memory, prefixes, src_mask=src_mask)
    last = logits.data[:, -1, :]
    z = last - last.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp[:, PAD] = -np.inf
    logp[:, BOS] = -np.inf
    return logp


def greedy_decode_batch(model, src, src_mask, max_len):
    """Greedy outputs for a batch; returns ``(token_lists, logprob_sums, lengths)``.

    Token lists exclude ``<bos>`` and the terminating ``<eos>``; ``lengths``
    counts generated tokens including ``<eos>``.
    """
    src = np.asarray(src)
    B = src.shape[0]
    max_len = min(max_len, model.cfg.max_positions - 1)
    with T.no_grad():
        memory = model.encode(src, src_mask)
        out = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        scores = np.zeros(B)
        lengths = np.zeros(B, dtype=np.int64)
        for _ in range(max_len):
            logp = _next_logprobs(model, memory, src_mask, out)
            tok = logp.argmax(axis=-1)
            tok = np.where(done, PAD, tok)
            scores += np.where(done, 0.0, logp[np.arange(B), tok])
            lengths += ~done
            out = np.concatenate([out, tok[:, None]], axis=1)
            done |= tok == EOS
            if done.all():
                break
    seqs = []
    for row in out[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        seqs.append(toks)
    return seqs, scores, lengths


def greedy_decode(model, src, max_len):
    """Argmax decoding from ``<bos>`` until ``<eos>`` or ``max_len`` tokens."""
    if not isinstance(src, SourceInput):
        src = SourceInput(token_ids=list(src))
    arr, mask = src.as_batch()
    seqs, _, _ = greedy_decode_batch(model, arr, mask, max_len)
    return seqs[0]


def length_norm(n, alpha):
    return ((5.0 + n) / 6.0) ** alpha


def beam_search(model, src, beam_size, max_len, alpha=1.0):
    """Beam search for one source; returns ``(tokens, normalized_score)``.

    Alive hypotheses at a step share a length, so they are ranked by raw
    log-probability; finished ones are compared by log-prob / length_norm.
    The greedy hypothesis is always among the candidates, so the result
    never scores below greedy decoding.
    """
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    if not isinstance(src, SourceInput):
        src = SourceInput(token_ids=list(src))
    arr, mask = src.as_batch()
    max_len = min(max_len, model.cfg.max_positions - 1)
    with T.no_grad():
        memory = model.encode(arr, mask)
        alive = [([BOS], 0.0)]
        finished = []
        for step in range(max_len):
            prefixes = np.array([h for h, _ in alive], dtype=np.int64)
            mem = T.Tensor(np.repeat(memory.data, len(alive), axis=0))
            logp = _next_logprobs(model, mem, np.repeat(mask, len(alive), axis=0), prefixes)
            cand = []
            for hi, (hyp, score) in enumerate(alive):
                for tok in np.flatnonzero(np.isfinite(logp[hi])):
                    cand.append((score + logp[hi, tok], hi, int(tok)))
            cand.sort(key=lambda c: (-c[0], c[1], c[2]))
            alive = []
            last = step == max_len - 1
            for score, hi, tok in cand:
                if len(alive) >= beam_size:
                    break
                hyp = prefixes[hi].tolist() + [tok]
                if tok == EOS or last:
                    finished.append((hyp, score))
                    if tok == EOS:
                        continue
                alive.append((hyp, score))
            if last:
                alive = []
            if not alive:
                break
            if len(finished) >= beam_size:
                break
    best = max(finished, key=lambda f: f[1] / length_norm(len(f[0]) - 1, alpha))
    hyp, score = best
    norm_score = score / length_norm(len(hyp) - 1, alpha)
    g_seqs, g_scores, g_lens = greedy_decode_batch(model, arr, mask, max_len)
    g_norm = g_scores[0] / length_norm(g_lens[0], alpha)
    if g_norm > norm_score:
        return g_seqs[0], float(g_norm)
    toks = [t for t in hyp[1:] if t != EOS]
    return toks, float(norm_score)


def beam_decode(model, src, beam_size=5, max_len=50, length_penalty_alpha=1.0):
    """Beam search output tokens (without ``<bos>``/``<eos>``)."""
    return beam_search(model, src, beam_size, max_len, length_penalty_alpha)[0]


def sequence_score(model, src, tokens, alpha=1.0, finished=True):
    """Normalized log-probability of ``tokens`` (plus ``<eos>`` if finished)."""
    if not isinstance(src, SourceInput):
        src = SourceInput(token_ids=list(src))
    arr, mask = src.as_batch()
    full = [BOS] + list(tokens) + ([EOS] if finished else [])
    with T.no_grad():
        memory = model.encode(arr, mask)
        total = 0.0
        for i in range(1, len(full)):
            logp = _next_logprobs(model, memory, mask, np.array([full[:i]]))
            total += logp[0, full[i]]
    return total / length_norm(len(full) - 1, alpha)


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model, vocab_src=None, vocab_tgt=None, extra=None):
    meta = {"kind": "model", "config": dataclasses.asdict(model.cfg)}
    if vocab_src is not None:
        meta["vocab_src"] = list(vocab_src.itos)
    if vocab_tgt is not None:
        meta["vocab_tgt"] = list(vocab_tgt.itos)
    if extra:
        meta["extra"] = extra
    save_arrays(path, {k: p.data for k, p in model.params.items()}, meta)


def load_model(path):
    """Return ``(model, meta)``; vocabularies, if stored, are in ``meta``."""
    arrays, meta = load_arrays(path)
    cfg = ModelConfig(**meta["config"])
    expected = init_params(cfg, T.RngState(0))
    if set(expected) != set(arrays):
        raise VocabMismatchError(f"{path}: parameter set does not match its config")
    for k, v in expected.items():
        if v.shape != arrays[k].shape:
            raise VocabMismatchError(f"{path}: {k} has shape {arrays[k].shape}, config implies {v.shape}")
    if "vocab_tgt" in meta and len(meta["vocab_tgt"]) != cfg.tgt_vocab_size:
        raise VocabMismatchError(f"{path}: stored target vocabulary size differs from tgt_vocab_size")
    if "vocab_src" in meta and cfg.src_feature_dim <= 0 and len(meta["vocab_src"]) != cfg.src_vocab_size:
        raise VocabMismatchError(f"{path}: stored source vocabulary size differs from src_vocab_size")
    params = {k: T.Tensor(arrays[k], requires_grad=True, name=k) for k in expected}
    return Transformer(cfg, params), meta
