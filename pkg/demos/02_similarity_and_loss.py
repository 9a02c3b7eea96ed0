# Cosine vs symmetric KL, and the token-level contrastive loss on a hand example.
import numpy as np

from conslt import contrastive as C

a, b = np.array([1.0, 2.0, 3.0]), np.array([20.0, 40.0, 60.0])
# parallel vectors: cosine cannot tell them apart, the softmax distributions differ a lot
print("cosine:", C.cosine_sim(a, b).item())
print("phi_kl:", C.phi_kl(a, b).item())

h = np.array([[1.0, 0.0]])
h_pos = np.array([[1.0, 0.0]])
negs = np.array([[[0.0, 1.0]]])
for metric in C.SIMILARITIES:
    for posden in (False, True):
        cfg = C.ContrastiveConfig(temperature=1.0, similarity=metric, positive_in_denominator=posden)
        loss = C.token_contrastive_loss(cfg, h, h_pos, negs).item()
        print(f"{metric:17s} positive_in_denominator={posden!s:5s} loss={loss:+.4f}")

# With only negatives below the fraction bar the loss has no floor in KL mode:
# scaling the anchor away from the negatives keeps lowering it.
cfg = C.ContrastiveConfig(temperature=0.1, similarity="bidirectional_kl")
for scale in (1, 4, 16):
    v = np.array([[scale * 1.0, 0.0, 0.0]])
    print("scale", scale, C.token_contrastive_loss(cfg, v, v, np.array([[[0.0, 0.0, scale * 1.0]]])).item())
