import numpy as np
import pytest

from eedlab.netcore import Batch, init_model, mlp_arch

# lines printed by the acceptance suite at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def fd_rel_error(fd, an, floor=1e-6):
    """Elementwise relative error with an absolute floor for entries that are ~0."""
    fd, an = np.asarray(fd), np.asarray(an)
    return np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)


def randomize_bn(model, rng):
    """Give batchnorm layers non-trivial affine params and running stats."""
    for layer in model.layers:
        if layer.kind == "batchnorm":
            c = layer.params["gamma"].shape
            layer.params["gamma"] = rng.uniform(0.5, 1.5, c)
            layer.params["beta"] = rng.normal(0, 0.2, c)
            layer.buffers["running_mean"] = rng.normal(0, 0.3, c)
            layer.buffers["running_var"] = rng.uniform(0.5, 2.0, c)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    model = init_model(mlp_arch(3, [5, 4], 3), seed=7)
    return randomize_bn(model, np.random.default_rng(7))


@pytest.fixture
def small_batch(rng):
    return Batch(rng.uniform(0, 1, (6, 3)), rng.integers(0, 3, 6))


def numeric_gradients(model, batch, training, step=1e-5):
    """Central finite differences of mean cross-entropy for every parameter and the input."""
    from eedlab.netcore import cross_entropy, forward

    def loss(x=batch.inputs):
        return cross_entropy(forward(model, x, training), batch.labels)

    out = {}
    for i, layer in enumerate(model.layers):
        for name, arr in layer.params.items():
            g = np.zeros_like(arr)
            flat, gf = arr.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                up = loss()
                flat[k] = orig - step
                down = loss()
                flat[k] = orig
                gf[k] = (up - down) / (2 * step)
            if name == "weight" and layer.mask is not None:
                g = g * (layer.mask != 0)
            out[f"{i}.{name}"] = g
    x = batch.inputs.copy()
    gx = np.zeros_like(x)
    flat, gf = x.reshape(-1), gx.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = loss(x)
        flat[k] = orig - step
        down = loss(x)
        flat[k] = orig
        gf[k] = (up - down) / (2 * step)
    out["input"] = gx
    return out


def gradient_check(model, batch, training, step=1e-5):
    """Worst relative error between analytic and finite-difference gradients, per key."""
    from eedlab.netcore import backward
    analytic, _ = backward(model, batch, training=training)
    numeric = numeric_gradients(model, batch, training, step)
    return {k: float(fd_rel_error(numeric[k], analytic[k]).max()) for k in numeric}


def random_conv_instance(seed):
    """Conv, batchnorm, relu, flatten and dense layers in one small random model."""
    from eedlab.netcore import Batch, init_model
    r = np.random.default_rng(seed)
    c_in = int(r.integers(1, 3))
    side = int(r.integers(3, 5))
    kernel = int(r.choice([1, 3]))
    c_mid = int(r.integers(2, 4))
    classes = int(r.integers(2, 4))
    arch = {"input_shape": [c_in, side, side], "num_classes": classes, "layers": [
        {"kind": "conv2d", "out": c_mid, "kernel": kernel},
        {"kind": "batchnorm"}, {"kind": "relu"}, {"kind": "flatten"},
        {"kind": "dense", "out": 4}, {"kind": "batchnorm"}, {"kind": "relu"},
        {"kind": "dense", "out": classes}]}
    model = randomize_bn(init_model(arch, seed), r)
    for i in model.prunable_indices():
        layer = model.layers[i]
        layer.params["weight"] = layer.params["weight"] * 2.0
        layer.mask = (r.uniform(size=layer.mask.shape) > 0.2).astype(float)
    n = int(r.integers(3, 6))
    batch = Batch(r.uniform(0, 1, (n, c_in, side, side)), r.integers(0, classes, n))
    return model, batch
