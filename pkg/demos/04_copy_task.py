# Train the toy transformer on the copy task with and without the contrastive term.
# Takes a few minutes per run on a laptop CPU.
import sys

from conslt.cli import mean_pairwise_cosine
from conslt.model import greedy_decode
from conslt.toy import toy_splits, train_toy

alpha = float(sys.argv[1]) if len(sys.argv) > 1 else 0.0
posden = len(sys.argv) > 2 and sys.argv[2] == "posden"
splits = toy_splits("copy")

def show(rec):
    print(f"epoch {rec['epoch']:2d} slt={rec['train_slt']:.3f} cl={rec['train_cl']:+.4f} "
          f"dev BLEU-4={rec['dev_bleu4']:.2f}")

model, result, _ = train_toy("copy", alpha, splits=splits, on_epoch=show,
                             cl_positive_in_denominator=posden)
print("best dev BLEU-4:", round(result.best_score, 2))
print("embedding mean pairwise cosine:", mean_pairwise_cosine(model.params["tgt_embedding"].data[4:]))

for ex in splits.test[:5]:
    src = splits.vocab_src.decode(ex.source)
    hyp = splits.vocab_tgt.decode(greedy_decode(model, ex.source, 20))
    print(" ".join(src), "->", " ".join(hyp))
