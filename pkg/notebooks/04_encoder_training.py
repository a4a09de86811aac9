# %% [markdown]
# # Training the encoder
#
# A two-block residual CNN maps an 80 x 360 Pole-Image to a unit vector.
# Contrastive training pulls two views of the same track together and
# pushes other tracks in the batch away; the supervised baseline treats
# track ids as classes.

# %%
import numpy as np

from polespl import encoder as enc

params = enc.init_params(seed=0)
print(params.num_parameters(), "parameters")
print({k: v.shape for k, v in list(params.tensors.items())[:4]})

# %% [markdown]
# Loss sanity: identical embeddings make every logit equal, so InfoNCE is
# exactly ln B.

# %%
same = np.tile(np.eye(128)[:1], (8, 1))
print(enc.infonce_loss(same, same, 0.07)[0], np.log(8))

# %% [markdown]
# A toy problem: 6 tracks, each a noisy variant of its own template.

# %%
rng = np.random.default_rng(1)
templates = (rng.random((6, 80, 360)) < 0.02).astype(float)
images = np.stack([np.clip(t + (rng.random(t.shape) < 0.005), 0, 1) for t in templates for _ in range(5)])
labels = np.repeat(np.arange(6), 5)

for objective in ("cl", "sl"):
    res = enc.train(images, labels, enc.TrainConfig(objective=objective, epochs=10, rng_seed=3))
    print(objective, "loss", round(res.loss_history[0], 3), "->", round(res.loss_history[-1], 3))

# %%
emb = enc.embed_batch(res.params, images)
sims = emb @ emb.T
same_track = labels[:, None] == labels[None, :]
np.fill_diagonal(same_track, False)
print("mean cosine, same track  :", sims[same_track].mean().round(3))
print("mean cosine, other tracks:", sims[labels[:, None] != labels[None, :]].mean().round(3))
