"""Train a small recurrently stacked model on string reversal, then probe it.

Run with ``python3 demos/toy_reversal.py [out_dir]``; takes a few minutes on
one core. Writes the sweep table and attention heatmaps under ``out_dir``
(default ``demo-out/reversal``).
"""

import sys
from pathlib import Path

from rsnmt import (DecodeConfig, Recurrent, TrainConfig, build_model, build_vocab, bleu,
                   export_attention, recurrence_sweep, translate)
from rsnmt.data import encode_corpus
from rsnmt.decoding import format_sweep
from rsnmt.model import ModelConfig
from rsnmt.toy import make_task, split
from rsnmt.training import train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out/reversal")

# %% data: 2k training pairs over a 46-symbol alphabet, plus dev and test
corpus = make_task("reverse", 2200, vocab_size=50, min_len=4, max_len=10, seed=100)
train_set, dev, test = split(corpus, 0, 200)
vocab = build_vocab(corpus.sources + corpus.targets, 100)
print(" ".join(test.sources[0]), "->", " ".join(test.targets[0]))

# %% one shared layer applied four times on each side
cfg = ModelConfig(len(vocab), len(vocab), 64, 64, 4, Recurrent(4),
                  share_src_tgt_embedding=True, tie_output_projection=True, dropout=0.0)
w = build_model(cfg, seed=0)
result = train(w, encode_corpus(train_set, vocab, vocab),
               TrainConfig(total_steps=1300, warmup_steps=300, base_lr=0.6, batch_tokens=768,
                           label_smoothing=0.1),
               on_step=lambda s, loss: s % 100 == 0 and print(f"step {s:4d}  loss {loss:.3f}"))

decode = DecodeConfig(beam_size=4, alpha=0.6)
tr = translate(w, test.sources, vocab, vocab, decode)
print(bleu(tr.outputs, test.targets))
for src, hyp in list(zip(test.sources, tr.outputs))[:3]:
    print(" ", " ".join(src), "=>", " ".join(hyp))

# %% decode with fewer or more applications of the decoder layer than trained
rows = recurrence_sweep(w, test.sources, test.targets, vocab, vocab, range(1, 9), decode)
print(format_sweep(rows))
out.mkdir(parents=True, exist_ok=True)
(out / "sweep.txt").write_text(format_sweep(rows))

# %% where does each recurrence look? heatmaps for the first test sentence
one = translate(w, test.sources[:1], vocab, vocab,
                DecodeConfig(beam_size=4, capture_attention=True, dec_recurrences=6))
paths = export_attention(one.traces[0], out / "attention", position=2)
print("wrote", ", ".join(p.name for p in paths))
