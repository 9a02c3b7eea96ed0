# The four negative sampling strategies on one small batch.
from collections import Counter

import numpy as np

from conslt import contrastive as C
from conslt import tensor as T
from conslt.corpus import Vocabulary

vocab = Vocabulary([f"w{i}" for i in range(12)])  # ids 4..15 after the four specials
batch = [[4, 5, 6], [6, 7, 8, 8], [9, 10]]
anchor = 0

for i, strategy in enumerate(C.STRATEGIES):
    pool = C.candidate_pool(strategy, vocab, batch, anchor)
    draws = C.NegativeSampler(strategy, vocab, 3).sample_ids(batch, anchor, 2000, T.RngState(1).substream(i))
    freq = Counter(draws.ravel().tolist())
    print(f"{strategy:16s} pool={sorted(set(pool.tolist()))}")
    print(" " * 17, "most drawn:", freq.most_common(4))

# batch pools keep multiplicity: in batch_excl_sent id 8 (twice in sentence 1) comes up about twice as often as 7
