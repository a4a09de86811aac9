# %% [markdown]
# # Cross-session retrieval
#
# The full chain on a small world: two traversals, automatic labels,
# contrastive training on the first, and Recall@K for sparse poles seen in
# the second. Everything goes through the same stage functions the CLI
# uses, so the run is reproducible from its seed.

# %%
import os
import tempfile

from polespl import pipeline as P
from polespl.retrieval import report_rows

cfg = P.load_config(None, {
    "pipeline.seed": "7",
    "synth.num_poles": "30",
    "synth.area": "150 150",
})

tmp = tempfile.mkdtemp()
paths = P.run_synth(cfg, os.path.join(tmp, "sessions"))
ref, qry = P.run_build_dataset([paths["train"], paths["test"]], cfg, os.path.join(tmp, "dataset"))

# %%
ckpt, loss_csv, result = P.run_train(ref, cfg, os.path.join(tmp, "models"), objective="cl")
print("loss", [round(v, 2) for v in result.loss_history[::5]])
base = P.run_untrained(ref, cfg, os.path.join(tmp, "models"))

# %%
for checkpoint in (ckpt, base):
    _, csv_path, report = P.run_eval(checkpoint, ref, qry, cfg, os.path.join(tmp, "reports"))
    for row in report_rows(report):
        print(",".join(row))

# %% [markdown]
# Chance level is one over the number of landmarks common to both runs.

# %%
reference, query = P.Manifest.load(ref), P.Manifest.load(qry)
landmarks, _ = P.match_landmarks(reference.tracks, query.tracks)
print(f"{len(landmarks)} landmarks, chance R@1 {100 / len(landmarks):.2f}%")
