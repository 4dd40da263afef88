# %% [markdown]
# # The synthetic two-domain world
#
# A source domain with generic relations and a civic target domain whose
# "new" object classes only ever pair with each other in the target. Pairs
# that also occur in the source are *seen*; the rest are *unseen*.

# %%
from collections import Counter

import numpy as np

from civicgraph.core import SEEN, UNSEEN
from civicgraph.data import SyntheticDomainConfig, generate_synthetic_domains

dom = generate_synthetic_domains(SyntheticDomainConfig(seed=0, num_source_images=200, num_target_images=400))
print(len(dom.source), "source images,", len(dom.target), "target images")
print(len(dom.partition.seen_pairs), "seen pairs,", len(dom.partition.unseen_pairs), "unseen pairs")

# %% [markdown]
# How the gold relations of the target split across the two pair sets:

# %%
labels = Counter(dom.partition.label(r.pair) for im in dom.target for r in im.gold_relations)
print({"seen": labels[SEEN], "unseen": labels[UNSEEN], "neither": labels[None]})

# %% [markdown]
# Each proposal carries a feature vector and detector class probabilities.
# Union features exist for every ordered pair of proposals.

# %%
im = dom.target[0]
p = im.proposals[0]
print(im.image_id, len(im.proposals), "proposals; feature dim", p.feature.shape[0])
print("detector argmax", int(np.argmax(p.label_probs)), "union keys", sorted(im.union_features)[:4])
