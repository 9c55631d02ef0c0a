"""Draw GP parameter fields on a sphere from the Laplace-Beltrami eigenbasis.

Run from the repository root:  python demos/spectral_fields.py
"""
import numpy as np

from erpcal import gp, mesh
from erpcal.shapes import icosphere
from erpcal.surrogate import SurrogateModel

sphere = icosphere(3, 20.0)  # radius in mm
basis = mesh.solve_eigenbasis(sphere, 64)
print(f"{sphere.n_vertices} vertices; first eigenvalues x R^2:",
      np.round(basis.eigenvalues[:9] * 20.0 ** 2, 2))

model = SurrogateModel.load("tests/data/surrogate_lhs100.txt")
for rho in (5.0, 20.0):
    f = gp.generate_ground_truth(basis, rho, seed=0, K=64, length_unit=3.2, surrogate=model)
    e2, e3 = model.predict(f.tau_out, f.apd_max)
    print(f"rho={rho:>4}: tau_out {f.tau_out.min():5.1f}..{f.tau_out.max():5.1f} ms, "
          f"APD_max {f.apd_max.min():5.0f}..{f.apd_max.max():5.0f} ms, "
          f"ERP_S2 {e2.min():4.0f}..{e2.max():4.0f} ms")
