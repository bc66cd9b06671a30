"""Parameter sharing: a recurrently stacked model is a one-layer model, reused.

Run with ``python3 demos/parameter_sharing.py``. Nothing is trained here.
"""

import numpy as np

from rsnmt import Recurrent, Vanilla, build_model, count_parameters
from rsnmt.model import with_stacking
from rsnmt.data import BOS, EOS, pad_batch
from rsnmt.model import ModelConfig, forward_loss, tied_copy_vanilla

base = ModelConfig(8000, 8000, 512, 2048, 8, Vanilla(6, 6),
                   share_src_tgt_embedding=True, tie_output_projection=True)

# %% parameter counts: depth costs nothing when the layer is shared
for stacking in (Vanilla(1, 1), Vanilla(6, 6), Recurrent(1), Recurrent(6), Recurrent(24)):
    print(f"{stacking!s:<28} {count_parameters(with_stacking(base, stacking)):>12,}")

# %% a recurrent model holds one encoder and one decoder layer
small = ModelConfig(30, 30, 16, 32, 2, Recurrent(3))
rs = build_model(small, seed=0)
print(len(rs.encoder_layers), "stored encoder layer,", small.enc_depth, "applications")

# unrolling it into three tied copies gives the same function
unrolled = tied_copy_vanilla(rs)
rng = np.random.default_rng(0)
src = pad_batch([[BOS, *rng.integers(4, 30, size=5).tolist(), EOS] for _ in range(2)])
tgt = pad_batch([[BOS, *rng.integers(4, 30, size=4).tolist(), EOS] for _ in range(2)])
a = forward_loss(rs, src.ids, src.mask, tgt.ids, tgt.mask).item()
b = forward_loss(unrolled, src.ids, src.mask, tgt.ids, tgt.mask).item()
print(f"loss RS(3) {a:.6f}   unrolled Vanilla(3) {b:.6f}")

# %% the stored layer is also what the recurrence override reuses at decode time
# (the model is untrained, so the tokens themselves mean nothing yet)
from rsnmt.decoding import DecodeConfig, beam_decode

for k in (1, 3, 6):
    hyp = beam_decode(rs, src, DecodeConfig(beam_size=2, max_len_a=4, dec_recurrences=k))
    print(f"k_dec={k}:", [h.tokens for h in hyp.hypotheses])
