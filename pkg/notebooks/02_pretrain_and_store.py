# %% [markdown]
# # Pretraining sources into a module store
#
# A tiny ViT is pretrained on clean glyphs.  Each corrupted source domain then
# gets a VPT module (prompts plus its own head) on the frozen backbone, and the
# selector is fitted on labeled source samples.  About 90 s on one core.

# %%
import tempfile

from pluto.experiment import ExperimentConfig, pretrain_world, save_world

cfg = ExperimentConfig(seed=0)
world = pretrain_world(cfg)

# %%
for row in world.param_table["modules"]:
    print(row)
print("selector", world.param_table["selector_stored"], world.param_table["selector_formula"])

# %% [markdown]
# Modules go into a directory store of digest-protected containers.

# %%
root = tempfile.mkdtemp(prefix="pluto-store-")
store = save_world(world, root)
for entry in store.list():
    print(entry["id"], entry["domain_label"], entry["sha256"][:12])
