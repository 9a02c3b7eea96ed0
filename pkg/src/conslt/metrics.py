"""Corpus BLEU-1..4 and ROUGE-L F1 over whitespace tokens."""
import collections
import dataclasses
import math

from .errors import ContractError


@dataclasses.dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    brevity_penalty: float
    precisions: list
    sentence_count: int

    def row(self):
        """The five scores in table order: BLEU-1..4, ROUGE."""
        return [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l]


def _check_pair(hypotheses, references):
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("no hypotheses to score")


def _ngrams(tokens, n):
    return collections.Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(hypotheses, references, max_n=4):
    """Clipped n-gram matches and totals per order, plus corpus lengths."""
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def brevity_penalty(hyp_len, ref_len):
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)


def bleu(hypotheses, references, max_n=4):
    """Unsmoothed corpus BLEU-``max_n`` as a percentage.

    Returns ``(score, precisions, brevity_penalty)``; the score is 0 when
    any modified precision up to ``max_n`` is 0.
    """
    _check_pair(hypotheses, references)
    matches, totals, c, r = ngram_stats(hypotheses, references, max_n)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    bp = brevity_penalty(c, r)
    if min(precisions) == 0.0:
        return 0.0, precisions, bp
    return 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n), precisions, bp


def lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hypothesis, reference):
    h, r = hypothesis.split(), reference.split()
    if not h and not r:
        return 1.0
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    return 2 * p * rec / (p + rec)


def rouge_l(hypotheses, references):
    """Mean sentence-level ROUGE-L F1 (beta = 1), as a percentage."""
    _check_pair(hypotheses, references)
    return 100.0 * sum(rouge_l_sentence(h, r) for h, r in zip(hypotheses, references)) / len(hypotheses)


def evaluate(hypotheses, references):
    scores = [bleu(hypotheses, references, n) for n in range(1, 5)]
    return EvalReport(*(s[0] for s in scores), rouge_l(hypotheses, references),
                      brevity_penalty=scores[-1][2], precisions=scores[-1][1],
                      sentence_count=len(hypotheses))
