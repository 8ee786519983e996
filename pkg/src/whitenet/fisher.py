"""Fisher information diagnostics for small networks.

A layer's Fisher block is E[vec(delta s^T) vec(delta s^T)^T], where delta
is the loss gradient at the layer's pre-activation, s is the layer's input
signal (previous activation in the canonical parametrization, the whitened
activation in the whitened one), and vec flattens by rows. The expectation
over labels is taken exactly by enumerating the output classes weighted by
the model's own predictive distribution; the expectation over inputs is the
empirical mean. The factorized form assumes delta and s independent and
keeps only the two covariance factors; its Kronecker product uses the
row-major vec convention, so F[km, ln] = delta_cov[k, l] * act_cov[m, n].
Off-block-diagonal (cross-layer) terms are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg, net
from .errors import DegenerateSpectrumError, FisherSizeError

MAX_BLOCK = 2000


@dataclass
class KroneckerFactors:
    delta_cov: np.ndarray  # E[delta delta^T], (N_i, N_i)
    act_cov: np.ndarray  # E[s s^T] uncentered, (N_{i-1}, N_{i-1})


@dataclass
class FisherBlock:
    layer_index: int
    kind: str  # "exact" | "factorized"
    matrix: np.ndarray | None
    factors: KroneckerFactors | None = None
    _eigenvalues: np.ndarray | None = field(default=None, repr=False)

    def eigenvalues(self) -> np.ndarray:
        """Spectrum (descending). For factorized blocks this is the sorted
        outer product of the factor spectra, which is exact and does not
        require materializing the Kronecker product."""
        if self._eigenvalues is None:
            if self.kind == "factorized":
                ld = linalg.sym_eig(self.factors.delta_cov).eigenvalues
                la = linalg.sym_eig(self.factors.act_cov).eigenvalues
                self._eigenvalues = np.sort(np.outer(ld, la).ravel())[::-1]
            else:
                self._eigenvalues = linalg.sym_eig(self.matrix).eigenvalues
        return self._eigenvalues

    def spectrum(self) -> linalg.EigenDecomposition:
        if self.matrix is None:
            raise FisherSizeError(
                "block matrix was not materialized; use eigenvalues() instead"
            )
        return linalg.sym_eig(self.matrix)

    def condition_number(self, **kw) -> float:
        return linalg.condition_number(self.eigenvalues(), **kw)


def _class_setup(model: net.Model, inputs):
    """Forward the inputs once and enumerate output classes: returns the
    trace plus per-class (weight, output-delta) pairs."""
    trace = model.forward(inputs)
    head = model.spec.layers[-1]
    h = trace.outputs
    if head.nonlinearity == "sigmoid" and model.spec.output_dim == 1:
        p1 = h[:, 0]
        return trace, [
            (1.0 - p1, h - 0.0),  # y = 0: delta = h - y
            (p1, h - 1.0),  # y = 1
        ]
    if head.nonlinearity == "softmax":
        c = model.spec.output_dim
        if c > 10:
            raise FisherSizeError(f"exact class enumeration capped at 10 classes, got {c}")
        pairs = []
        for y in range(c):
            onehot = np.zeros(c)
            onehot[y] = 1.0
            pairs.append((h[:, y], h - onehot))
        return trace, pairs
    raise ValueError(
        "Fisher blocks need a sigmoid (binary) or softmax (<=10 classes) head, "
        f"got {head.nonlinearity!r} with {model.spec.output_dim} outputs"
    )


def _layer_deltas_and_signal(model, trace, layer_index, class_pairs):
    """Per-class deltas at ``layer_index`` plus the layer's input signal."""
    phi = model.phi if model.kind == "whitened" else None
    signal = (
        trace.whitened_inputs[layer_index]
        if model.kind == "whitened"
        else trace.layer_input(layer_index)
    )
    out = []
    for weight, delta_last in class_pairs:
        deltas = net.backpropagate_deltas(trace, model.params, model.spec, delta_last, phi=phi)
        out.append((weight, deltas[layer_index]))
    return out, signal


def _block_dims(model, layer_index):
    layer = model.spec.layers[layer_index]
    return layer.out_dim, layer.in_dim


def exact_fisher_block(model: net.Model, inputs, layer_index: int) -> FisherBlock:
    """Exact per-layer Fisher block: labels enumerated, inputs averaged."""
    n_out, n_in = _block_dims(model, layer_index)
    size = n_out * n_in
    if size > MAX_BLOCK:
        raise FisherSizeError(f"exact block would be {size}x{size} (cap {MAX_BLOCK})")
    trace, class_pairs = _class_setup(model, np.asarray(inputs, dtype=np.float64))
    per_class, signal = _layer_deltas_and_signal(model, trace, layer_index, class_pairs)
    b = signal.shape[0]
    f = np.zeros((size, size))
    for weight, deltas in per_class:
        g = np.einsum("bi,bj->bij", deltas, signal).reshape(b, size)
        f += (g * weight[:, None]).T @ g
    f /= b
    f = (f + f.T) / 2.0
    return FisherBlock(layer_index, "exact", f)


def factorized_fisher_block(model: net.Model, inputs, layer_index: int):
    """Kronecker-factorized block under the delta/activation independence
    assumption: returns (factors, block). The block matrix is materialized
    only within the tractability cap; eigenvalues are exact either way."""
    n_out, n_in = _block_dims(model, layer_index)
    trace, class_pairs = _class_setup(model, np.asarray(inputs, dtype=np.float64))
    per_class, signal = _layer_deltas_and_signal(model, trace, layer_index, class_pairs)
    b = signal.shape[0]
    delta_cov = np.zeros((n_out, n_out))
    for weight, deltas in per_class:
        delta_cov += (deltas * weight[:, None]).T @ deltas
    delta_cov /= b
    delta_cov = (delta_cov + delta_cov.T) / 2.0
    act_cov = signal.T @ signal / b
    act_cov = (act_cov + act_cov.T) / 2.0
    factors = KroneckerFactors(delta_cov, act_cov)
    size = n_out * n_in
    matrix = np.kron(delta_cov, act_cov) if size <= MAX_BLOCK else None
    return factors, FisherBlock(layer_index, "factorized", matrix, factors)


@dataclass
class ConditioningRow:
    layer: int
    kind: str
    lambda_max: float
    lambda_min: float
    cond: float
    cond_ratio: float | None = None
    flag: str = ""


def conditioning_report(
    model: net.Model,
    inputs,
    kinds=("factorized",),
    baselines: dict | None = None,
) -> list[ConditioningRow]:
    """Per-layer condition numbers for the requested block kinds.

    ``baselines`` maps (layer, kind) to the pre-whitening condition number;
    when given, each row carries the ratio to it. Degenerate spectra and
    over-cap exact blocks are flagged rather than raised."""
    rows = []
    for layer_index in range(model.spec.depth):
        for kind in kinds:
            try:
                if kind == "exact":
                    block = exact_fisher_block(model, inputs, layer_index)
                else:
                    _, block = factorized_fisher_block(model, inputs, layer_index)
                lam = block.eigenvalues()
                cond = linalg.condition_number(lam)
            except FisherSizeError:
                rows.append(ConditioningRow(layer_index, kind, np.nan, np.nan, np.nan, flag="too_large"))
                continue
            except DegenerateSpectrumError:
                rows.append(ConditioningRow(layer_index, kind, np.nan, np.nan, np.nan, flag="degenerate"))
                continue
            ratio = None
            if baselines is not None and (layer_index, kind) in baselines:
                ratio = cond / baselines[(layer_index, kind)]
            rows.append(
                ConditioningRow(
                    layer_index, kind, float(lam.max()), float(lam.min()), cond, ratio
                )
            )
    return rows
