"""Cluster the strongest first-layer activations with and without a patch.
A patch tends to pull them into one tight blob."""
from lisfguard.experiments import characterize, cluster_summary, train_default_patch
from lisfguard.victim import default_victim

net = default_victim()
patch = train_default_patch(net).patch
res = characterize(net, patch, n=100)
for name in ("benign", "patched"):
    s = cluster_summary(res[name])
    print(f"{name:8s} single-cluster {s['single_cluster_fraction']:.2f}  median clusters "
          f"{s['median_clusters']:.0f}  histogram {s['cluster_histogram']}")
