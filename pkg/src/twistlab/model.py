"""MLP backbone + projection head + affine-free batch norm before softmax.

Forward and backward passes are written out by hand, layer by layer, in the
style of the classic ``affine_forward`` / ``batchnorm_backward`` pairs. All
parameters live in one flat ``dict`` keyed by dotted names so optimizers,
the EMA teacher and checkpoints can treat them uniformly.

Layer layout::

    backbone.{i}: linear -> [bn] -> relu          for each backbone width
    head.0:       linear -> [bn] -> relu
    head.1:       linear -> [bn] -> relu
    head.2:       linear                           (width = class count)
    nbs:          batch norm without affine parameters   (optional)
    softmax

A linear layer carries a bias only when no batch norm follows it; a bias in
front of batch norm is cancelled by the mean subtraction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import GradientCheckError, InvalidInputError
from .losses import TwistCoefficients, symmetric_grads_from_logits, twist_loss_symmetric
from .numerics import as_matrix, stable_softmax

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_tokens = itertools.count()


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    class_count: int
    backbone_widths: tuple[int, ...] = (256, 256)
    head_widths: tuple[int, int] = (256, 256)
    backbone_bn: bool = True
    head_bn: bool = True
    nbs: bool = True
    # Multiplier on the init scale of the final head layer.
    output_gain: float = 1.0
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM

    def __post_init__(self):
        widths = (self.input_dim, *self.backbone_widths, *self.head_widths, self.class_count)
        if any(int(w) < 1 for w in widths):
            raise InvalidInputError(f"all layer widths must be >= 1, got {widths}")
        if len(self.head_widths) != 2:
            raise InvalidInputError("the projection head has exactly two hidden layers")
        if self.class_count < 2:
            raise InvalidInputError("class_count must be at least 2")
        if self.bn_eps <= 0:
            raise InvalidInputError("bn_eps must be positive")

    def layers(self) -> list[dict]:
        """Static description of every linear block, in forward order."""
        blocks = []
        fan_in = self.input_dim
        for i, w in enumerate(self.backbone_widths):
            blocks.append(dict(name=f"backbone.{i}", fan_in=fan_in, fan_out=w,
                               bn=self.backbone_bn, relu=True))
            fan_in = w
        for i, w in enumerate(self.head_widths):
            blocks.append(dict(name=f"head.{i}", fan_in=fan_in, fan_out=w,
                               bn=self.head_bn, relu=True))
            fan_in = w
        blocks.append(dict(name="head.2", fan_in=fan_in, fan_out=self.class_count,
                           bn=False, relu=False))
        for b in blocks:
            b["bias"] = not b["bn"] and not (b["name"] == "head.2" and self.nbs)
        return blocks


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass
class ForwardTrace:
    """Everything backward needs from one train-mode forward pass."""

    owner: int
    train: bool
    inputs: dict = field(default_factory=dict)  # linear layer inputs
    bn: dict = field(default_factory=dict)  # BatchNormCache per bn layer
    relu_masks: dict = field(default_factory=dict)
    features: np.ndarray | None = None  # head output, the NBS input
    logits: np.ndarray | None = None  # softmax input
    probs: np.ndarray | None = None


class TwistNet:
    """Network state: parameters, batch-norm running statistics and mode."""

    def __init__(self, config: ModelConfig, params: dict, buffers: dict):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.training = True
        self._token = next(_tokens)

    # ---------------------------------------------------------------- state

    def train(self, mode: bool = True) -> "TwistNet":
        self.training = mode
        return self

    def eval(self) -> "TwistNet":
        return self.train(False)

    def copy(self) -> "TwistNet":
        clone = TwistNet(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )
        clone.training = self.training
        return clone

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -------------------------------------------------------------- forward

    def _bn_forward(self, x, name, affine, train, update_stats, trace):
        eps = self.config.bn_eps
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                rate = self.config.bn_momentum
                rm, rv = self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"]
                rm *= 1.0 - rate
                rm += rate * mean
                rv *= 1.0 - rate
                rv += rate * var
        else:
            mean = self.buffers[f"{name}.running_mean"]
            var = self.buffers[f"{name}.running_var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        if trace is not None:
            trace.bn[name] = BatchNormCache(xhat, inv_std, mean, var)
        if affine:
            return xhat * self.params[f"{name}.gamma"] + self.params[f"{name}.beta"]
        return xhat

    def forward(self, batch, update_stats: bool = True):
        """Return ``(probs, trace)`` for a batch of input rows.

        Train mode normalizes with batch statistics and, unless
        ``update_stats`` is false, folds them into the running statistics.
        """
        x = as_matrix(batch, "batch")
        if x.shape[1] != self.config.input_dim:
            raise InvalidInputError(
                f"batch has {x.shape[1]} columns, model expects {self.config.input_dim}"
            )
        train = self.training
        if train and x.shape[0] < 2:
            raise InvalidInputError("train-mode forward needs at least 2 rows for batch statistics")
        trace = ForwardTrace(owner=self._token, train=train)
        for layer in self.config.layers():
            name = layer["name"]
            trace.inputs[name] = x
            x = x @ self.params[f"{name}.weight"].T
            if layer["bias"]:
                x = x + self.params[f"{name}.bias"]
            if layer["bn"]:
                x = self._bn_forward(x, f"{name}.bn", True, train, update_stats, trace)
            if layer["relu"]:
                mask = x > 0.0
                trace.relu_masks[name] = mask
                x = x * mask
        trace.features = x
        if self.config.nbs:
            x = self._bn_forward(x, "nbs", False, train, update_stats, trace)
        trace.logits = x
        trace.probs = stable_softmax(x)
        return trace.probs, trace

    def predict_proba(self, batch) -> np.ndarray:
        """Eval-mode probabilities; leaves the model state untouched."""
        was = self.training
        self.training = False
        try:
            probs, _ = self.forward(batch, update_stats=False)
        finally:
            self.training = was
        return probs

    def embed(self, batch) -> np.ndarray:
        """Eval-mode backbone output (input to the projection head)."""
        x = as_matrix(batch, "batch")
        for layer in self.config.layers():
            name = layer["name"]
            if not name.startswith("backbone."):
                break
            x = x @ self.params[f"{name}.weight"].T
            if layer["bias"]:
                x = x + self.params[f"{name}.bias"]
            if layer["bn"]:
                x = self._bn_forward(x, f"{name}.bn", True, False, False, None)
            x = np.maximum(x, 0.0)
        return x

    # ------------------------------------------------------------- backward

    @staticmethod
    def _bn_backward(dy, cache: BatchNormCache):
        n = dy.shape[0]
        return (cache.inv_std / n) * (
            n * dy - dy.sum(axis=0) - cache.xhat * (dy * cache.xhat).sum(axis=0)
        )

    def backward(self, trace: ForwardTrace, dlogits, return_feature_grad: bool = False):
        """Parameter gradients given dL/d(softmax input).

        With ``return_feature_grad`` also returns dL/d(head output), the
        gradient arriving at the NBS layer.
        """
        if trace.owner != self._token:
            raise InvalidInputError("trace was produced by a different model")
        if not trace.train:
            raise InvalidInputError("backward needs a train-mode trace")
        g = as_matrix(dlogits, "dlogits")
        if g.shape != trace.logits.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != logits shape {trace.logits.shape}")
        grads = {}
        if self.config.nbs:
            g = self._bn_backward(g, trace.bn["nbs"])
        feature_grad = g
        for layer in reversed(self.config.layers()):
            name = layer["name"]
            if layer["relu"]:
                g = g * trace.relu_masks[name]
            if layer["bn"]:
                bn = f"{name}.bn"
                cache = trace.bn[bn]
                grads[f"{bn}.gamma"] = (g * cache.xhat).sum(axis=0)
                grads[f"{bn}.beta"] = g.sum(axis=0)
                g = self._bn_backward(g * self.params[f"{bn}.gamma"], cache)
            if layer["bias"]:
                grads[f"{name}.bias"] = g.sum(axis=0)
            grads[f"{name}.weight"] = g.T @ trace.inputs[name]
            g = g @ self.params[f"{name}.weight"]
        grads = {k: grads[k] for k in self.params}
        if return_feature_grad:
            return grads, feature_grad
        return grads


def init_model_from_config(config: ModelConfig, seed: int) -> TwistNet:
    """He-style uniform fan-in initialization: U(-a, a) with a = sqrt(6 / fan_in)."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for layer in config.layers():
        name = layer["name"]
        bound = np.sqrt(6.0 / layer["fan_in"])
        if name == "head.2":
            bound *= config.output_gain
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(layer["fan_out"], layer["fan_in"]))
        if layer["bias"]:
            params[f"{name}.bias"] = np.zeros(layer["fan_out"])
        if layer["bn"]:
            params[f"{name}.bn.gamma"] = np.ones(layer["fan_out"])
            params[f"{name}.bn.beta"] = np.zeros(layer["fan_out"])
            buffers[f"{name}.bn.running_mean"] = np.zeros(layer["fan_out"])
            buffers[f"{name}.bn.running_var"] = np.ones(layer["fan_out"])
    if config.nbs:
        buffers["nbs.running_mean"] = np.zeros(config.class_count)
        buffers["nbs.running_var"] = np.ones(config.class_count)
    return TwistNet(config, params, buffers)


def init_model(layer_sizes, class_count: int, seed: int, **overrides) -> TwistNet:
    """Build a model from ``[input_dim, *backbone_widths]``.

    Remaining architecture options (head widths, batch-norm toggles, ...)
    are passed through to ``ModelConfig``.
    """
    layer_sizes = list(layer_sizes)
    if not layer_sizes:
        raise InvalidInputError("layer size list is empty")
    config = ModelConfig(
        input_dim=int(layer_sizes[0]),
        class_count=int(class_count),
        backbone_widths=tuple(int(w) for w in layer_sizes[1:]),
        **overrides,
    )
    return init_model_from_config(config, seed)


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    errors: dict  # layer name -> max relative error over its tensors
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def failing_layers(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tol]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _layer_of(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0]


def two_view_loss_and_grads(model: TwistNet, view1, view2, coeffs: TwistCoefficients,
                            update_stats: bool = True):
    """Symmetric loss of two views through the shared network, with parameter gradients."""
    _, t1 = model.forward(view1, update_stats=update_stats)
    _, t2 = model.forward(view2, update_stats=update_stats)
    breakdown, g1, g2 = symmetric_grads_from_logits(t1.logits, t2.logits, coeffs)
    grads1 = model.backward(t1, g1)
    grads2 = model.backward(t2, g2)
    return breakdown, {k: grads1[k] + grads2[k] for k in grads1}


def grad_check(model: TwistNet, batch, coeffs: TwistCoefficients,
               fd_step: float = 1e-5, tol: float = 1e-5, second_view=None) -> GradCheckReport:
    """Compare analytic gradients of the two-view loss with central differences.

    The second view defaults to ``batch`` plus fixed Gaussian noise. Errors
    are ``|analytic - numeric| / max(|analytic|, |numeric|)`` in the
    Euclidean norm of each tensor; each layer reports its worst tensor.
    Running statistics are not touched.
    """
    if second_view is None:
        batch = as_matrix(batch, "batch")
        second_view = batch + 0.1 * np.random.default_rng(0).standard_normal(batch.shape)
    model = model.copy().train()

    _, analytic = two_view_loss_and_grads(model, batch, second_view, coeffs, update_stats=False)

    def loss() -> float:
        p1, _ = model.forward(batch, update_stats=False)
        p2, _ = model.forward(second_view, update_stats=False)
        value = twist_loss_symmetric(p1, p2, coeffs).total
        if not np.isfinite(value):
            raise GradientCheckError("non-finite loss while probing parameters")
        return value

    errors: dict[str, float] = {}
    for name, tensor in model.params.items():
        numeric = np.zeros_like(tensor)
        flat, nflat = tensor.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            up = loss()
            flat[i] = orig - fd_step
            down = loss()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * fd_step)
        a = analytic[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        err = 0.0 if scale == 0.0 else float(np.linalg.norm(a - numeric) / scale)
        layer = _layer_of(name)
        errors[layer] = max(errors.get(layer, 0.0), err)
    return GradCheckReport(errors, tol)


__all__ = [
    "ModelConfig",
    "TwistNet",
    "ForwardTrace",
    "GradCheckReport",
    "init_model",
    "init_model_from_config",
    "grad_check",
    "two_view_loss_and_grads",
]
