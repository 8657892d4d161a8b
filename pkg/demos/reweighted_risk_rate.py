"""
Per-subclass risk from superclass samples
==========================================

With the true mixture densities, weighting each superclass example by
p(x | z = c) / p(x | y) gives an unbiased estimate of subclass c's risk
without ever seeing z. The worst error over subclasses shrinks like
1 / sqrt(n); a log-log fit of the error against n has slope near -1/2.
"""
import numpy as np

from stratum import models, riskest, synthgen

# One random spec and a fixed linear model
spec = synthgen.lemma1_spec(d=3, seed=0)
model = models.init_classifier(models.LINEAR, 3, 2, seed=1)
data = synthgen.sample_dataset(spec, 4000, seed=2)

W = riskest.spec_weight_matrix(spec, data.features, data.y)
print("largest weight", W.values.max(), "<= 1 / pi_min =", 1 / spec.subclass_probs.min())
print("per-subclass risk (uses z):  ", np.round(riskest.per_subclass_risk(model, data), 4))
print("reweighted risk (no z needed):", np.round(riskest.reweighted_risk(model, data, W), 4))

# Scaling over a doubling grid, averaged over 20 random specs
res = riskest.lemma1_experiment(d=3, trials=20, seed=0)
for n, g in zip(res.n_grid, res.mean_gaps):
    print(f"n={n:5d}  mean worst-subclass error {g:.5f}")
print(f"fitted slope {res.slope:.3f}")
