import numpy as np
import pytest

from pfeddsu import model as nn
from pfeddsu.data import partition_by_classes, synth_classification
from pfeddsu.tensor import Rng

# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_model(in_dim, hidden, classes, seed, activation="tanh", bias_scale=0.1):
    """Random MLP params with nonzero biases."""
    arch = nn.mlp(in_dim, hidden, classes, activation)
    p = nn.init_params(arch, Rng(seed))
    gen = np.random.default_rng(seed + 7)
    layers = []
    for j, v in enumerate(p.layers):
        v = v.copy()
        n_in, n_out = arch.dense[j].in_dim, arch.dense[j].out_dim
        v[n_in * n_out:] = bias_scale * gen.standard_normal(n_out)
        layers.append(v)
    return nn.ModelParams(arch, tuple(layers))


def random_batch(in_dim, classes, size, seed):
    gen = np.random.default_rng(seed)
    return nn.Batch(gen.standard_normal((size, in_dim)), gen.integers(0, classes, size))


@pytest.fixture
def shards_small():
    data = synth_classification(4, 30, 6, 3.0, Rng(11))
    plan = partition_by_classes(data, 3, 2, Rng(12))
    return plan.shards(data)


def fd_gradient(params, anchor, mask, batch, reg, step=1e-5):
    """Central finite differences of composite_loss over every parameter coordinate."""
    out = []
    for j, v in enumerate(params.layers):
        g = np.zeros_like(v)
        for k in range(v.size):
            vals = []
            for sgn in (1.0, -1.0):
                w = v.copy()
                w[k] += sgn * step
                layers = list(params.layers)
                layers[j] = w
                vals.append(nn.composite_loss(nn.ModelParams(params.arch, tuple(layers)),
                                              anchor, mask, batch, reg))
            g[k] = (vals[0] - vals[1]) / (2 * step)
        out.append(g)
    return out


def max_rel_err(a, b, floor=1e-6):
    a, b = np.concatenate(a), np.concatenate(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
