# %% [markdown]
# # Ranking metrics on hand-made rankings
#
# Recall@k divides hits by the number of gold items; precision@k divides by
# the number of ranked items actually inspected.

# %%
from civicgraph.core import BoundingBox, ScoredRelation
from civicgraph.evaluation import count_correct, iou, precision_at_k, recall_at_k

gold = {"bench", "lamp"}
ranked = ["tree", "bench", "car", "lamp"]
for k in (1, 2, 5):
    print(k, recall_at_k(gold, ranked, k), precision_at_k(gold, ranked, k))

# %% [markdown]
# Relation matching is one-to-one; with a grounding threshold both boxes must
# also overlap their gold counterparts.

# %%
a, b = BoundingBox(0.3, 0.3, 0.2, 0.2), BoundingBox(0.7, 0.7, 0.2, 0.2)
shifted = BoundingBox(0.42, 0.3, 0.2, 0.2)
print("iou", iou(a, shifted))
gold_rel = [ScoredRelation(0, a, 1, 1, b, 1.0)]
pred = [ScoredRelation(0, shifted, 1, 1, b, 0.9), ScoredRelation(0, a, 1, 1, b, 0.8)]
for k in (1, 2):
    print(k, "ungrounded", count_correct(pred, gold_rel, k, None), "grounded", count_correct(pred, gold_rel, k, 0.5))
