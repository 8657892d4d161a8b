"""
Finding a small hidden group by overclustering
===============================================

Silhouette-based model selection picks k = 2 on two big blobs even when a
tight group of 40 points sits beside one of them. Splitting each cluster
into F pieces and promoting pieces that raise their own Silhouette
surfaces the small group.
"""
import numpy as np

from stratum import cluster

rng = np.random.default_rng(0)
points = np.vstack([rng.normal(size=(400, 2)),
                    rng.normal(size=(400, 2)) + [12, 0],
                    0.3 * rng.normal(size=(40, 2)) + [0, 5]])
hidden = np.arange(800, 840)

base = cluster.auto_cluster(points, k_range=range(2, 6), seed=0)
print(f"auto-k: {base.method} with k={base.k}, mean per-cluster Silhouette {base.silhouette:.3f}")
print("hidden points spread over base clusters:", np.unique(base.labels[hidden]))

oc = cluster.overcluster(points, base, F=5, s_min=cluster.default_s_min(len(points)), seed=0)
print(f"after overclustering: k={oc.k}")
for g in range(oc.k):
    members = oc.labels == g
    share = np.mean(members[hidden])
    print(f"  cluster {g}: {members.sum():4d} points, holds {share:.0%} of the hidden group")
