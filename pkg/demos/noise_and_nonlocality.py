"""How experimental noise eats the Wigner contrast and the CHSH violation.

Uses a reduced grid so it finishes in well under a minute; the acceptance
suite runs the full-size budget.
"""

import numpy as np

from jointparity import cli
from jointparity.analysis.budget import BudgetConfig, error_budget
from jointparity.analysis.chsh import chsh_maximize
from jointparity.evolve import NoiseModel
from jointparity.hamiltonian import NoiseDrive

noise = NoiseModel(nbar_init=(0.03, 0.03), heat_rates=(6.1, 39.0), noise_60hz=NoiseDrive(2 * np.pi * 150))

budget = error_budget(noise, config=BudgetConfig(dims=(14, 14), grid_points=9),
                      progress=lambda m: print("  ...", m))
print("\ncontrast loss by step and source")
for stage, source, loss in budget.table():
    print(f"  {stage:>5}  {source:<12} {100 * loss:6.2f}%")

cfg = cli.parse_config("""
[run]
experiment = chsh
[physics]
mode_dims = 12, 12
[noise]
nbar_init = 0.03, 0.03
heat_rates = 6.1, 39
noise_60hz_hz = 150
""")
print("\nCHSH parameter (classical bound 2)")
for source in ("ideal", "g-stage", "gdm"):
    res = chsh_maximize(cli.chsh_source(cfg, source, (1.2, 1.2)))
    print(f"  {source:<8} S = {res.S:.4f}   (grid-limited {res.S_grid:.4f})")
