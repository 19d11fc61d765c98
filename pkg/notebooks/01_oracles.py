# %% [markdown]
# # Gradient and bound oracles
#
# Everything in the adaptation loop rests on a handful of closed forms.
# This walk-through checks them numerically: the worst-case LN perturbation,
# the sharpness-aware gradient against central differences, and the
# mixture-of-sources bound on 1-D Gaussian problems.

# %%
import numpy as np

from pluto import checks
from pluto.sam import epsilon_star

# %% [markdown]
# The perturbation lives on the sphere of radius rho and points along the gradient.

# %%
eps = epsilon_star([3.0, 4.0], 0.05)
print(eps, np.linalg.norm(eps))

# %% [markdown]
# Sharpness-aware gradient vs a finite-difference pipeline (the perturbation is
# itself built from a finite-difference gradient), on a small ViT.

# %%
for seed in range(5):
    print(seed, f"{checks.sam_gradient_vs_fd(seed):.2e}", f"{checks.rho_limit_error(seed):.2e}")

# %% [markdown]
# A blend of the source predictors weighted by density ratios never does worse
# than the best single source on the mixture.

# %%
for r in checks.run_oracle_suite(configs=5):
    print(r.line())
