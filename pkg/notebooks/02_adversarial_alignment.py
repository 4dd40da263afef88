# %% [markdown]
# # Aligning unseen pair representations with seen ones
#
# Pretrain a small relation head on the source, then alternate discriminator
# and projection updates on target pairs. Only `W_h` and `W_t` move.

# %%
import torch

from civicgraph.adapt import AdaptConfig, Discriminator, adversarial_train, discriminator_input_dim
from civicgraph.checkpoint import changed_tensors
from civicgraph.data import SyntheticDomainConfig, generate_synthetic_domains
from civicgraph.relmodel import RelationHead, RelationHeadConfig, pretrain

torch.set_num_threads(1)
dom = generate_synthetic_domains(SyntheticDomainConfig(seed=1, num_source_images=200, num_target_images=400,
                                                       feature_dim=16))
cfg = RelationHeadConfig(len(dom.objects), dom.predicates.num_relations, 16, embed_dim=8,
                         object_hidden=16, edge_hidden=16, decoder_hidden=16)
model = RelationHead(cfg, seed=0)
model.init_frequency_bias(dom.source)
pretrain(model, dom.source, epochs=3, lr=3e-3)
before = model.checkpoint()

# %%
disc = Discriminator(discriminator_input_dim(16, "concatenated"), hidden=16, seed=0)
res = adversarial_train(model, disc, dom.target, dom.partition,
                        AdaptConfig(N_m=10, N_d=30, epochs=4, batch_size=32, probe_size=128))
for epoch in range(4):
    rows = [r for r in res.log if r["epoch"] == epoch]
    print(epoch, "probe accuracy after the disc block", rows[29]["disc_accuracy"],
          "after the model block", rows[-1]["disc_accuracy"])

# %% [markdown]
# The pretrained tensors that changed:

# %%
print(sorted(changed_tensors(before, model.checkpoint())))
