# %% [markdown]
# # Deep visual words from a single feature map
#
# A pooling layer of VGG16 gives a grid of depth vectors.  We treat each grid
# cell as a local descriptor, scale it to unit length, and quantize it against
# a k-means codebook.  This walk-through runs on a random map so it needs no
# model file.

# %%
import numpy as np

from bodvw import (
    FeatureMap,
    KMeansConfig,
    encode_counts,
    finalize_l2,
    normalize_rows,
    train_codebook,
    unroll,
)
from bodvw.encoder import normalize_features

rng = np.random.default_rng(0)

# %% [markdown]
# ## Normalizing depth vectors
#
# Every vector is divided by its L2 norm plus a tiny epsilon, so the zero
# vector stays at zero instead of dividing by zero.

# %%
v = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0], [1e-3, 0.0, 0.0]])
print(normalize_rows(v))
print("norms:", np.linalg.norm(normalize_rows(v), axis=1))

# %% [markdown]
# The third row shows the epsilon at work: for very small vectors the result
# falls slightly short of unit length.

# %% [markdown]
# ## From a p_4 map to 196 descriptors

# %%
fmap = FeatureMap(4, rng.random((14, 14, 512)).astype(np.float32), "random-map")
raw = unroll(fmap)
feats = normalize_features(raw, "bodvw")
print(raw.vectors.shape, feats.norm_tag)

# %% [markdown]
# ## A small codebook
#
# Real codebooks pool the descriptors of every training image and use k=400.
# Here ten random maps and k=12 keep things quick.

# %%
pool = [normalize_features(unroll(FeatureMap(4, rng.random((14, 14, 512)).astype(np.float32))), "bodvw")
        for _ in range(10)]
book = train_codebook(pool, KMeansConfig(k=12, n_restarts=2, seed=1))
print(f"k={book.k} dim={book.dim} inertia={book.inertia:.3f} hash={book.hash}")

# %% [markdown]
# ## Histogram and final normalization

# %%
counts = encode_counts(feats, book)
print("counts:", counts.weights, "sum:", counts.weights.sum())
bodvw = finalize_l2(counts)
print("L2 norm of the BoDVW vector:", np.linalg.norm(bodvw.weights))
