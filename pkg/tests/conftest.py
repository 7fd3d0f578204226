import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import settings

from dtpstereo.config import IMAGE, LayerSpec, ModelConfig, build_config

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def setting3():
    return build_config("Setting3", 192, 16)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def toy_config(widths=(4, 4), d_max=8, norm=True, bias=True) -> ModelConfig:
    """Smallest nets the pipeline accepts: two stride-2 feature convs, one cost
    conv over the concatenated views, one logit conv.

    widths: output channels of the two feature convs.
    """
    a, b = widths
    layers = []

    def conv(name, x, cin, cout, stride, module):
        layers.append(LayerSpec(name, "conv2d", [x], cin, cout, 3, stride, 1, module, bias=bias))
        if norm and module == "feature":
            layers.append(LayerSpec(name + "_bn", "norm", [name], cout, cout, module=module))
            layers.append(LayerSpec(name + "_relu", "activation", [name + "_bn"], cout, cout,
                                    module=module))
            return name + "_relu"
        return name

    x = conv("f1", IMAGE, 3, a, 2, "feature")
    x = conv("f2", x, a, b, 2, "feature")
    layers.append(LayerSpec("cat", "concat", [f"left:{x}", f"right:{x}"], 2 * b, 2 * b,
                            module="cost_volume"))
    y = conv("cv", "cat", 2 * b, d_max // 4, 1, "cost_volume")
    y = conv("logits", y, d_max // 4, d_max, 1, "regression")
    layers.append(LayerSpec("up", "bilinear_upsample", [y], d_max, d_max, module="regression",
                            match=IMAGE))
    return ModelConfig(d_max=d_max, base_channels=a, setting="Setting3", layers=layers).validate()


def n_prune(r: float, n: int) -> int:
    """Exact floor(r * n) using the decimal value of r, capped to keep one channel."""
    if n < 2:
        return 0
    return min(math.floor(Fraction(str(r)) * n), n - 1)


def sort_oracle(scores, r: float) -> list[int]:
    """Lowest floor(r*n) scores, ties to the lower index, by a full Python sort."""
    order = sorted(range(len(scores)), key=lambda i: (float(scores[i]), i))
    return sorted(order[: n_prune(r, len(scores))])
