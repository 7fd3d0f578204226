"""
Coupled channel pruning
=======================

Channels that must disappear together (a conv output, the norm after it,
every conv that reads it, both views of a concat) form one group. Groups
are ranked by the summed L2 norm of their kernel slices and the weakest
fraction is removed.
"""

import torch

from dtpstereo.config import build_config
from dtpstereo.model import DTPNet
from dtpstereo.pruning import build_dependency_graph, importance_table, prune_step

cfg = build_config("Setting3", d_max=192, base_channels=16)
graph = build_dependency_graph(cfg)

# prunable groups and their channel counts
for g in graph.prunable:
    print(f"  {g.name:<14} {g.size:>4} channels  {len(g.members)} members")

# groups pinned by the interface: image input, cost volume and logit head
for g in graph.unprunable:
    print(f"  fixed {g.name:<10} {g.reason}")

# one group in detail: the first stage feeds a residual block, and cv1 reads it
# once per view through the concat, so cv1 appears twice
g = graph.group("feat1_down")
for m in g.members:
    print(f"    {m.tensor:<34} axis {m.axis}  {'kernel' if m.kernel else 'norm/bias'}")

torch.manual_seed(0)
net = DTPNet(cfg).eval()
scores = importance_table(graph, net.state_dict())
print("feat1_down scores", scores["feat1_down"].round(3))

# five rounds at 10 %: each round floors r * n per group
x = torch.rand(1, 3, 64, 96)
for step in range(5):
    net, rec = prune_step(net, 0.1)
    with torch.no_grad():
        _, disp = net(x, x)
    print(f"round {step + 1}: params {rec['params_before']} -> {rec['params_after']}, "
          f"disparity {tuple(disp.shape)}")
print("group sizes", build_dependency_graph(net.config).sizes())
