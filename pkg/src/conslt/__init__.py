"""Token-level contrastive training for low-resource sequence-to-sequence translation."""
from .contrastive import (ContrastiveConfig, NegativeSampler, NegativeSet, cosine_sim, phi_kl,
                          sample_negatives, sentence_contrastive_loss, similarity,
                          token_contrastive_loss)
from .config import RunConfig, load_config, parse_config
from .corpus import Vocabulary, batch_iter, build_vocab, load_tsv, make_synthetic_corpus
from .metrics import EvalReport, bleu, evaluate, rouge_l
from .model import ModelConfig, SourceInput, Transformer, beam_decode, greedy_decode
from .tensor import RngState, Tensor, backward, no_grad
from .train import TrainConfig, fit, train_step

__version__ = "0.1.0"
