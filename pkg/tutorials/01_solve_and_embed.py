"""Solve the 14-bus AC-OPF, then compute a sparse load embedding.

Run with ``python3 tutorials/01_solve_and_embed.py``.
"""

import numpy as np

from gridembed.acopf import check_feasibility, solve_acopf, solve_power_flow
from gridembed.embedding import EmbeddingConfig, compression_report, encode_loads
from gridembed.grid import load_bundled

net, loads = load_bundled("case14")
res = solve_acopf(net, loads)
print(f"status {res.status.value}, cost {res.objective:.2f} $/h, "
      f"worst violation {check_feasibility(net, loads, res.point).worst:.1e}")

emb = encode_loads(net, loads, EmbeddingConfig(beta=0.005))
comp = compression_report(loads, emb.embedded)
print(f"embedding: {emb.iterations} subproblem(s), cost gap {100 * emb.cost_error:.3f}%")
print(f"nonzero loads: active -{comp.active:.1f}%, reactive -{comp.reactive:.1f}%, joint -{comp.joint:.1f}%")

# where did the load go?
np.set_printoptions(precision=3, suppress=True)
print("original p:", loads.p)
print("embedded p:", emb.embedded.p)

# the embedded loads are served by the *original* dispatch
pf = solve_power_flow(net, emb.embedded, emb.reference.dispatch, warm=emb.point)
print("fixed-dispatch power flow feasible:", check_feasibility(net, emb.embedded, pf.point, 1e-5).passed)
