"""Central finite-difference verification of every layer kind and every
training loss on seeded micro-models.

The analytic gradient of a scalar loss must match (f(w+e) - f(w-e)) / 2e
entry by entry; the reported figure per check is the worst relative error
max |a - n| / max(|a|, |n|, 1e-4).

Central differences are undefined across the leaky_relu kink. For each
parameter entry the harness traces the sign pattern of every leaky_relu
input at w+e and w-e; entries whose window crosses a kink are excluded
from the comparison and counted, and the excluded fraction stays tiny.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import adversarial as adv
from . import autodiff as ad
from .network import LayerSpec, Network

EPS = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    n_skipped: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def __str__(self):
        state = "ok" if self.ok else "FAIL"
        return (f"{self.name:28s} max_rel_err={self.max_rel_error:.3e} "
                f"checked={self.n_checked} kink_skipped={self.n_skipped} [{state}]")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # The 1e-4 denominator floor turns the comparison absolute for near-zero
    # gradients; central differences of an O(10) loss carry ~1e-10 roundoff,
    # so vanishing gradients are still resolved with wide margin.
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@contextmanager
def _trace_leaky(record: list):
    # temporarily observe the sign of every leaky_relu input
    orig = ad.leaky_relu

    def traced(a, alpha=0.2):
        record.append(a.data > 0.0)
        return orig(a, alpha)

    ad.leaky_relu = traced
    try:
        yield
    finally:
        ad.leaky_relu = orig


def _eval_signed(evaluate) -> tuple[float, tuple]:
    record: list[np.ndarray] = []
    with _trace_leaky(record):
        val = evaluate()
    signs = tuple(arr.tobytes() for arr in record)
    return val, signs


class _FDChecker:
    """Accumulates per-entry central differences, skipping kink crossings."""

    def __init__(self, name: str, eps: float = EPS):
        self.name = name
        self.eps = eps
        self.worst = 0.0
        self.n_checked = 0
        self.n_skipped = 0

    def check_array(self, p: np.ndarray, analytic: np.ndarray, evaluate) -> None:
        flat = p.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + self.eps
            hi, signs_hi = _eval_signed(evaluate)
            flat[i] = keep - self.eps
            lo, signs_lo = _eval_signed(evaluate)
            flat[i] = keep
            if signs_hi != signs_lo:
                self.n_skipped += 1
                continue
            numeric = (hi - lo) / (2.0 * self.eps)
            self.worst = max(self.worst, relative_error(a_flat[i], numeric))
            self.n_checked += 1

    def result(self) -> CheckResult:
        return CheckResult(self.name, self.worst, self.n_checked, self.n_skipped)


def check_network_gradients(name: str, net: Network, x: np.ndarray,
                            eps: float = EPS) -> CheckResult:
    """Backprop vs central differences for sum(tanh(net(x))) over every
    parameter of the network."""
    def build():
        nodes = net.make_param_nodes()
        out = net.apply(ad.Tensor(x), nodes)
        return ad.sum_all(ad.tanh(out)), nodes

    loss, nodes = build()
    ad.backprop(loss)
    checker = _FDChecker(name, eps)
    for layer_params, layer_nodes in zip(net.params, nodes):
        for p, node in zip(layer_params, layer_nodes):
            analytic = node.grad if node.grad is not None else np.zeros_like(p)
            checker.check_array(p, analytic, lambda: build()[0].item())
    return checker.result()


def _micro_model(seed: int) -> adv.BiGANModel:
    return adv.build_bigan(image_hw=8, code_dim=4, channels=(2, 3, 4),
                           disc_hidden=(8, 6), seed=seed)


def _micro_batch(seed: int, n: int = 3, hw: int = 8, code_dim: int = 4):
    rng = np.random.default_rng(seed + 4000)
    x = rng.uniform(-1.0, 1.0, size=(n, 1, hw, hw))
    z = rng.uniform(-1.0, 1.0, size=(n, code_dim))
    return x, z


# loss name -> (graph picker, networks the loss actually depends on)
_LOSSES = {
    "bigan_jsd_disc": (lambda m, nd, x, z: adv.build_bigan_jsd_graphs(m, nd, x, z)[0],
                       ("en", "de", "dj")),
    "wasserstein_critic": (lambda m, nd, x, z: adv.build_wasserstein_graphs(m, nd, x, z)[0],
                           ("en", "de", "dj")),
    "cycle": (lambda m, nd, x, z: adv.build_cycle_graph(m, nd, x, z),
              ("en", "de")),
    "side_data": (lambda m, nd, x, z: adv.build_side_data_graphs(m, nd, x, z)[0],
                  ("de", "dx")),
    "side_code": (lambda m, nd, x, z: adv.build_side_code_graphs(m, nd, x, z)[0],
                  ("en", "dz")),
}


def check_loss_gradients(loss_name: str, seed: int, eps: float = EPS) -> CheckResult:
    """One training loss against central differences over all parameters of
    the networks it depends on."""
    builder, net_names = _LOSSES[loss_name]
    model = _micro_model(seed)
    x, z = _micro_batch(seed)

    def evaluate():
        nodes = {name: net.make_param_nodes() for name, net in model.networks().items()}
        return builder(model, nodes, x, z), nodes

    loss, nodes = evaluate()
    ad.backprop(loss)
    checker = _FDChecker(f"{loss_name}@{seed}", eps)
    for name in net_names:
        net = model.networks()[name]
        for layer_params, layer_nodes in zip(net.params, nodes[name]):
            for p, node in zip(layer_params, layer_nodes):
                analytic = node.grad if node.grad is not None else np.zeros_like(p)
                checker.check_array(p, analytic, lambda: evaluate()[0].item())
    return checker.result()


def layer_check_suite(seed: int = 0) -> list[CheckResult]:
    """One small network per layer kind, each checked against central
    differences."""
    rng = np.random.default_rng(seed * 733 + 17)
    x_vec = rng.uniform(-1.0, 1.0, size=(3, 6))
    x_img = rng.uniform(-1.0, 1.0, size=(2, 2, 8, 8))
    cases = {
        "dense": (Network([LayerSpec("dense", fan_in=6, fan_out=4)], seed=seed), x_vec),
        "conv2d": (Network([LayerSpec("conv2d", fan_in=2, fan_out=3, kernel=4,
                                      stride=2)], seed=seed), x_img),
        "leaky_relu": (Network([LayerSpec("dense", fan_in=6, fan_out=5),
                                LayerSpec("leaky_relu", alpha=0.2)], seed=seed), x_vec),
        "tanh": (Network([LayerSpec("dense", fan_in=6, fan_out=5),
                          LayerSpec("tanh")], seed=seed), x_vec),
        "sigmoid": (Network([LayerSpec("dense", fan_in=6, fan_out=5),
                             LayerSpec("sigmoid")], seed=seed), x_vec),
        "flatten": (Network([LayerSpec("conv2d", fan_in=2, fan_out=2, kernel=3,
                                       stride=1),
                             LayerSpec("flatten"),
                             LayerSpec("dense", fan_in=128, fan_out=3)], seed=seed),
                    x_img),
        "reshape": (Network([LayerSpec("dense", fan_in=6, fan_out=8),
                             LayerSpec("reshape", shape=(2, 2, 2))], seed=seed), x_vec),
        "upsample": (Network([LayerSpec("upsample", factor=2),
                              LayerSpec("conv2d", fan_in=2, fan_out=1, kernel=3,
                                        stride=1)], seed=seed), x_img),
    }
    return [check_network_gradients(f"layer:{kind}@{seed}", net, x)
            for kind, (net, x) in cases.items()]


def loss_check_suite(seeds=(0, 1, 2)) -> list[CheckResult]:
    return [check_loss_gradients(name, seed) for name in _LOSSES for seed in seeds]


def run_all(seeds=(0, 1, 2)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        results.extend(layer_check_suite(seed))
    results.extend(loss_check_suite(seeds))
    return results
