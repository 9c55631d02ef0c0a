"""Small end-to-end calibration: hide a truth, observe ERP intervals, recover it.

Uses the bundled surrogate so no strip simulations are needed.  Takes about a
minute on one core.  Run from the repository root.
"""
import numpy as np

from erpcal import calibration as cal, gp, mesh
from erpcal.hmc import HMCConfig
from erpcal.shapes import icosphere
from erpcal.surrogate import SurrogateModel

sphere = icosphere(3, 20.0)
basis = mesh.solve_eigenbasis(sphere, 256)
model = SurrogateModel.load("tests/data/surrogate_lhs100.txt")

truth = gp.generate_ground_truth(basis, 20.0, seed=1, length_unit=3.2, surrogate=model)
e2, e3 = model.predict(truth.tau_out, truth.apd_max)
sites = mesh.maximin_design(sphere, basis, 10, 0.6, seed=1).vertices
obs = cal.make_observations(e2, e3, sites, 10.0)
print(f"{len(obs)} interval observations at {len(sites)} sites")

target = cal.PosteriorTarget(basis, obs, model, K=24, length_unit=3.2)
samples = cal.calibrate(target, HMCConfig(iterations=2000, chains=2, seed=0))
print(f"max split R-hat {samples.rhat.max():.3f}, divergences {samples.n_divergent}")

s = cal.posterior_fields(samples, basis, model, 24, length_unit=3.2)
z = cal.ise(e2, s.mean["erp_s2"], s.sd["erp_s2"])
print(f"ERP_S2 RMSE {cal.rmse(s.mean['erp_s2'], e2):.1f} ms "
      f"(truth SD {e2.std():.1f} ms); ISE<3 at {100 * np.mean(z < 3):.0f}% of vertices")
