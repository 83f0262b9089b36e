# %% [markdown]
# # Overfitting two short sequences
#
# A few hundred Adam steps on 5-frame clips are enough for the full model to
# memorise two 10-frame sequences. Inference then runs in clips of any length.
# Takes several minutes on one CPU core; lower STEPS for a quick look.

# %%
import logging

from bird.config import RunConfig
from bird.evaluation import plot_pr
from bird.synthdata import make_sequences
from bird.training import evaluate_model, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
STEPS = 500

seqs = make_sequences(2, 11, length=10)
result = train(RunConfig(steps=STEPS, seed=0), seqs, progress_every=50)

# %%
for n in (4, 8, 12):
    report = evaluate_model(result.model, seqs, n_infer=n)
    print(f"N_infer={n:2d}  AP50={report.ap50:.3f}  Pr={report.precision:.3f}  Re={report.recall:.3f}")
plot_pr(report.pr_points, "overfit_pr.png")
