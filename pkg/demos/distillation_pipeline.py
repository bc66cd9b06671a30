"""The full command line pipeline on a toy corpus.

teacher (vanilla, 3 layers) -> distilled corpus -> student RS(2) initialised
from a teacher layer -> BLEU and a significance test against a student
trained on the original data.

Run with ``python3 demos/distillation_pipeline.py [work_dir]``. Each step is
printed as the shell command it corresponds to.
"""

import shlex
import subprocess
import sys
from pathlib import Path

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out/pipeline")
MODEL = ["--d-model", "32", "--d-ff", "64", "--heads", "4", "--share-embeddings",
         "--steps", "400", "--warmup", "100", "--lr", "0.5", "--batch-tokens", "512"]


def rsnmt(*args):
    args = [str(a) for a in args]
    print("$ rsnmt", shlex.join(args), flush=True)
    subprocess.run([sys.executable, "-m", "rsnmt", *args], check=True)


# %% a noisy reversal corpus: 20% of target tokens are replaced at random
data = work / "data"
rsnmt("gen-toy", "--task", "reverse", "--pairs", 1500, "--test", 200, "--min-len", 4,
      "--max-len", 8, "--noise", 0.2, "--out", data, "--seed", 1)
# the held-out references should be clean, so regenerate the same sources without noise
rsnmt("gen-toy", "--task", "reverse", "--pairs", 1500, "--test", 200, "--min-len", 4,
      "--max-len", 8, "--out", work / "clean", "--seed", 1)
test_src, test_ref = work / "clean" / "test.src", work / "clean" / "test.tgt"

# %% teacher
rsnmt("train", "--src", data / "train.src", "--tgt", data / "train.tgt",
      "--out", work / "teacher", "--layers", 3, *MODEL)

# %% re-translate the training sources with the teacher
rsnmt("distill", "--teacher", work / "teacher" / "model.rsnmt", "--src", data / "train.src",
      "--ref", data / "train.tgt", "--out", work / "distilled", "--beam", 4)

# %% students: one on the distilled corpus (seeded from teacher layer 2),
# one from scratch on the original noisy corpus
distilled = work / "distilled" / "distilled"
rsnmt("train", "--src", f"{distilled}.src", "--tgt", f"{distilled}.tgt",
      "--out", work / "student-kd", "--recurrences", 2, *MODEL,
      "--init-from-teacher", work / "teacher" / "model.rsnmt", "--l-enc", 2, "--l-dec", 2)
rsnmt("train", "--src", data / "train.src", "--tgt", data / "train.tgt",
      "--out", work / "student-orig", "--recurrences", 2, *MODEL)

# %% evaluate
for name in ("teacher", "student-kd", "student-orig"):
    rsnmt("translate", "--model", work / name / "model.rsnmt", "--input", test_src,
          "--out", work / name / "test", "--time")
    rsnmt("bleu", work / name / "test" / "hyp.txt", test_ref)
rsnmt("significance", work / "student-kd" / "test" / "hyp.txt",
      work / "student-orig" / "test" / "hyp.txt", test_ref, "--resamples", 1000)

# %% the student's provenance names both the layer transfer and the distilled corpus
from rsnmt.training import load_checkpoint

print(load_checkpoint(work / "student-kd" / "model.rsnmt").provenance)

# %% and its decoder can be run with other recurrence counts
rsnmt("sweep-recurrence", "--model", work / "student-kd" / "model.rsnmt", "--src", test_src,
      "--ref", test_ref, "--out", work / "student-kd" / "sweep", "--range", "1..4")
