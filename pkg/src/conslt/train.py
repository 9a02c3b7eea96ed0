"""Joint training: cross entropy plus weighted contrastive loss, Adam, plateau LR, early stop."""
import copy
import dataclasses
import json
import logging
import math

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .contrastive import (ContrastiveConfig, NegativeSampler, sentence_contrastive_loss,
                          sentence_representation, token_contrastive_loss)
from .corpus import SPECIAL_IDS, batch_iter, collate
from .errors import ConfigError, ContractError, NonFiniteLossError, NumericError
from .metrics import bleu, rouge_l
from .model import greedy_decode_batch

log = logging.getLogger(__name__)

# substream namespaces under the run seed
_STEP_STREAM, _SHUFFLE_STREAM = 1, 2
PASS1, PASS2, NEGATIVES = 1, 2, 3


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.998
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 30
    plateau_factor: float = 0.7
    plateau_patience: int = 5
    early_stop_patience: int = 10
    label_smoothing: float = 0.0
    grad_clip: float = 5.0  # global-norm clip; <= 0 disables
    seed: int = 0
    enable_cl: bool = True
    max_decode_len: int = 40
    stop_at_score: float = None  # end fit once dev BLEU-4 reaches this
    contrastive: ContrastiveConfig = dataclasses.field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0 < self.plateau_factor <= 1:
            raise ConfigError("plateau_factor must be in (0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.998, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m, self.v = {}, {}

    def update(self, params, grads, lr):
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclasses.dataclass
class TrainState:
    optimizer: Adam
    lr: float
    epoch: int = 0
    best_score: float = -math.inf
    epochs_since_improve: int = 0

    @property
    def step(self):
        return self.optimizer.step

    @classmethod
    def fresh(cls, cfg):
        return cls(Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps), cfg.learning_rate)


def save_train_state(path, state):
    arrays = {}
    for name in state.optimizer.m:
        arrays["m/" + name] = state.optimizer.m[name]
        arrays["v/" + name] = state.optimizer.v[name]
    opt = state.optimizer
    meta = {"kind": "train_state", "step": opt.step, "lr": state.lr, "epoch": state.epoch,
            "best_score": None if math.isinf(state.best_score) else state.best_score,
            "epochs_since_improve": state.epochs_since_improve,
            "adam": [opt.beta1, opt.beta2, opt.eps]}
    save_arrays(path, arrays, meta)


def load_train_state(path):
    arrays, meta = load_arrays(path)
    opt = Adam(*meta["adam"])
    opt.step = meta["step"]
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        (opt.m if kind == "m" else opt.v)[name] = arr
    best = meta["best_score"]
    return TrainState(opt, meta["lr"], meta["epoch"], -math.inf if best is None else best,
                      meta["epochs_since_improve"])


def slt_loss(logits, gold_targets, mask, label_smoothing=0.0):
    """Token cross entropy averaged over non-pad target positions."""
    return T.cross_entropy_with_logits(logits, gold_targets, mask, label_smoothing)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclasses.dataclass
class StepResult:
    total: float
    slt: float
    cl: float
    grad_norm: float
    streams: tuple  # substream keys used for (pass 1, pass 2, negatives)


def step_streams(seed, step):
    base = T.RngState(seed).substream(_STEP_STREAM, step)
    return base.substream(PASS1), base.substream(PASS2), base.substream(NEGATIVES)


def contrastive_term(model, batch, ccfg, hidden1, hidden2, sampler, rng):
    """Unweighted contrastive loss for one batch (pads excluded)."""
    mask = batch.out_mask
    B, Tt, d = hidden1.shape
    if ccfg.granularity == "sentence":
        cl = sentence_contrastive_loss(ccfg, sentence_representation(hidden1, mask),
                                       sentence_representation(hidden2, mask))
    else:
        flat = np.flatnonzero(mask.reshape(-1))
        h1 = T.index_select(hidden1.reshape(B * Tt, d), flat)
        h2 = T.index_select(hidden2.reshape(B * Tt, d), flat)
        sentences = [[t for t in row[m] if t not in SPECIAL_IDS] for row, m in zip(batch.tgt, batch.tgt_mask)]
        ids = np.concatenate([sampler.sample_ids(sentences, i, int(mask[i].sum()), rng) for i in range(B)])
        negs = T.embedding_lookup(model.params["tgt_embedding"], ids)
        cl = token_contrastive_loss(ccfg, h1, h2, negs)
    if ccfg.batch_mean:
        cl = cl * (1.0 / B)
    return cl


def train_step(model, batch, cfg, state, sampler=None):
    """Two dropout-distinct passes, joint loss, backward, one Adam update."""
    rng1, rng2, rng_neg = step_streams(cfg.seed, state.step)
    ccfg = cfg.contrastive
    try:
        mem1 = model.encode(batch.src, batch.src_mask, rng1, training=True)
        hidden1, logits1 = model.decode(mem1, batch.tgt_in, batch.src_mask, rng1, training=True)
        slt = slt_loss(logits1, batch.tgt_out, batch.out_mask, cfg.label_smoothing)
        if cfg.enable_cl:
            if sampler is None:
                sampler = NegativeSampler(ccfg.strategy, model.cfg.tgt_vocab_size, ccfg.num_negatives)
            mem2 = model.encode(batch.src, batch.src_mask, rng2, training=True)
            hidden2, _ = model.decode(mem2, batch.tgt_in, batch.src_mask, rng2, training=True)
            cl = contrastive_term(model, batch, ccfg, hidden1, hidden2, sampler, rng_neg)
            total = slt + cl * ccfg.weight
            cl_value = cl.item()
        else:
            total, cl_value = slt, 0.0
    except NumericError as exc:
        raise NonFiniteLossError({"step": state.step, "error": str(exc)}) from exc
    result = StepResult(total.item(), slt.item(), cl_value, 0.0,
                        (rng1.stream, rng2.stream, rng_neg.stream))
    if not all(math.isfinite(x) for x in (result.total, result.slt, result.cl)):
        raise NonFiniteLossError({"step": state.step, "total": result.total,
                                  "slt": result.slt, "cl": result.cl})
    model.zero_grad()
    total.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    result.grad_norm = clip_grad_norm(grads, cfg.grad_clip)
    state.optimizer.update(model.params, grads, state.lr)
    return result


def translate_examples(model, examples, vocab_tgt, max_len, batch_size=64):
    """Greedy hypotheses (detokenized strings) for a list of examples."""
    out = []
    for start in range(0, len(examples), batch_size):
        batch = collate(examples[start:start + batch_size])
        seqs, _, _ = greedy_decode_batch(model, batch.src, batch.src_mask, max_len)
        out.extend(" ".join(vocab_tgt.decode(s)) for s in seqs)
    return out


def references_of(examples, vocab_tgt):
    return [" ".join(vocab_tgt.decode(e.target[1:])) for e in examples]


def snapshot(model):
    return {k: p.data.copy() for k, p in model.params.items()}


def restore(model, arrays):
    for k, p in model.params.items():
        p.data[...] = arrays[k]


@dataclasses.dataclass
class FitResult:
    best_params: dict
    history: list
    steps: list
    best_score: float
    epochs_run: int


def fit(model, train_set, dev_set, cfg, vocab_tgt, dev_refs=None, on_epoch=None, state=None):
    """Train until ``max_epochs`` or early stopping; returns the best-dev snapshot.

    After each epoch dev BLEU-4 is computed from greedy decodes. No
    improvement for ``plateau_patience`` epochs multiplies the learning rate
    by ``plateau_factor``; ``early_stop_patience`` such epochs end training.
    """
    if not train_set or not dev_set:
        raise ContractError("fit needs non-empty train and dev sets")
    state = state or TrainState.fresh(cfg)
    ccfg = cfg.contrastive
    sampler = NegativeSampler(ccfg.strategy, model.cfg.tgt_vocab_size, ccfg.num_negatives)
    dev_refs = dev_refs if dev_refs is not None else references_of(dev_set, vocab_tgt)
    history, steps = [], []
    best = snapshot(model)
    for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
        shuffle_rng = T.RngState(cfg.seed).substream(_SHUFFLE_STREAM, epoch)
        slt_sum = cl_sum = 0.0
        n_batches = 0
        for batch in batch_iter(train_set, cfg.batch_size, shuffle=True, rng=shuffle_rng):
            r = train_step(model, batch, cfg, state, sampler)
            steps.append(r)
            slt_sum += r.slt
            cl_sum += r.cl
            n_batches += 1
        hyps = translate_examples(model, dev_set, vocab_tgt, cfg.max_decode_len)
        dev_bleu4 = bleu(hyps, dev_refs, 4)[0]
        record = {"epoch": epoch, "train_slt": slt_sum / n_batches, "train_cl": cl_sum / n_batches,
                  "lr": state.lr, "dev_bleu4": dev_bleu4, "dev_rouge": rouge_l(hyps, dev_refs)}
        history.append(record)
        state.epoch = epoch
        if dev_bleu4 > state.best_score:
            state.best_score = dev_bleu4
            state.epochs_since_improve = 0
            best = snapshot(model)
        else:
            state.epochs_since_improve += 1
            if state.epochs_since_improve % cfg.plateau_patience == 0:
                state.lr *= cfg.plateau_factor
        log.info("epoch %d slt=%.4f cl=%.4f bleu4=%.2f lr=%.2e", epoch, record["train_slt"],
                 record["train_cl"], dev_bleu4, record["lr"])
        if on_epoch is not None:
            on_epoch(record)
        if state.epochs_since_improve >= cfg.early_stop_patience:
            break
        if cfg.stop_at_score is not None and dev_bleu4 >= cfg.stop_at_score:
            break
    return FitResult(best, history, steps, state.best_score, state.epoch)


def write_history(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def config_copy(cfg, **changes):
    """A deep copy of a TrainConfig with top-level or ``contrastive.*`` overrides."""
    new = copy.deepcopy(cfg)
    for key, value in changes.items():
        if key.startswith("contrastive."):
            setattr(new.contrastive, key.split(".", 1)[1], value)
        else:
            setattr(new, key, value)
    return new
