"""
Soft group membership
=====================

Instead of hard cluster labels, worst-group training can use estimated
density-ratio weights from a Gaussian mixture fitted per superclass.
Every superclass example then counts toward every cluster of its
superclass, in proportion to its weight.
"""
from stratum import dro, harness, metrics

hard = harness.ExperimentConfig(name="hard", trials=2)
soft = hard.replace(name="soft", dro=dro.DroConfig(mode=dro.SOFT))

for cfg in (hard, soft):
    run = harness.run_george(cfg)
    true = run.value("george", "test", metrics.TRUE_SUBCLASS)
    print(f"{cfg.dro.mode:>10}: true robust accuracy {true['mean']:.3f} ± {true['ci95']:.3f}")
