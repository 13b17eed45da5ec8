from __future__ import annotations
from typing import Any, Callable, Iterable, Optional, Sequence, Tuple

import dataclasses
import re
import numpy as np

from loopymp import autodiff as ad
from loopymp.errors import ConfigurationError, ParseError
from loopymp.llr import LLR_CLAMP

__all__ = [
    "finite_difference_gradient",
    "HIDDEN_UNITS",
    "init_params",
    "load_params",
    "mlp_forward",
    "MLPParams",
    "neural_fn_update",
    "neural_fn_update_extrinsic",
    "save_params",
]

HIDDEN_UNITS = 7

_TENSORS = ("W1", "b1", "W2", "b2", "w3", "b3")
_HEADER = re.compile(r"^MLP n_in=(?P<n_in>\d+) h=(?P<h>\d+)$")


@dataclasses.dataclass(frozen=True)
class MLPParams:
    """Weights of the factor-node update network.

    y = w3 . tanh(W2^T relu(W1^T x + b1) + b2) + b3, with ``W1`` of shape
    (n_in, 7), ``W2`` (7, 7), ``w3`` and the biases of length 7 and ``b3``
    of shape (1,). Fields hold tape variables while a pass is recorded.
    """

    W1: Any
    b1: Any
    W2: Any
    b2: Any
    w3: Any
    b3: Any

    @property
    def n_in(self) -> int:
        return int(ad.value(self.W1).shape[0])

    def tensors(self) -> Tuple[Tuple[str, np.ndarray], ...]:
        return tuple((name, ad.value(getattr(self, name))) for name in _TENSORS)

    def apply(self, f: Callable[..., Any], *others: MLPParams) -> MLPParams:
        """Combine field by field with any number of other parameter sets."""
        return MLPParams(
            **{
                name: f(getattr(self, name), *(getattr(o, name) for o in others))
                for name in _TENSORS
            }
        )

    def zeros_like(self) -> MLPParams:
        return self.apply(lambda t: np.zeros_like(ad.value(t)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for _, t in self.tensors())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.tensors()])

    def unflatten(self, flat: np.ndarray) -> MLPParams:
        parts, start = {}, 0
        for name, t in self.tensors():
            parts[name] = np.asarray(flat[start : start + t.size]).reshape(t.shape)
            start += t.size
        return MLPParams(**parts)

    @property
    def size(self) -> int:
        return sum(t.size for _, t in self.tensors())


def _shapes(n_in: int):
    h = HIDDEN_UNITS
    return dict(W1=(n_in, h), b1=(h,), W2=(h, h), b2=(h,), w3=(h,), b3=(1,))


def init_params(n_in: int, seed: Optional[int] = None) -> MLPParams:
    """Glorot-uniform weights and zero biases, deterministic for a given seed."""
    if n_in < 1:
        raise ConfigurationError(f"Network input arity must be positive, got {n_in}.")

    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out, shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    h = HIDDEN_UNITS
    return MLPParams(
        W1=glorot(n_in, h, (n_in, h)),
        b1=np.zeros(h),
        W2=glorot(h, h, (h, h)),
        b2=np.zeros(h),
        w3=glorot(h, 1, (h,)),
        b3=np.zeros(1),
    )


def mlp_forward(params: MLPParams, x: Any, tape: Optional[ad.Tape] = None) -> Any:
    """Evaluate the network on one feature vector or a stack of them.

    Parameters
    ----------
    params : MLPParams
        Network weights.
    x : array or Variable
        Features with the input arity on the last axis.
    tape : Optional[ad.Tape], optional
        If given, the parameters are registered on it and the pass recorded.

    Returns
    -------
    float, array or Variable
        Unclamped output, shaped like ``x`` without its last axis.
    """
    if ad.value(x).shape[-1] != params.n_in:
        raise ConfigurationError(
            f"Network expects {params.n_in} inputs, got {ad.value(x).shape[-1]}."
        )
    if tape is not None:
        params = tape.parameters(params)

    h1 = ad.relu(ad.add(ad.matmul(x, params.W1), params.b1))
    h2 = ad.tanh(ad.add(ad.matmul(h1, params.W2), params.b2))
    y = ad.add(ad.matmul(h2, params.w3), params.b3)
    y = ad.reshape(y, ad.value(x).shape[:-1])

    if isinstance(y, np.ndarray) and y.ndim == 0:
        return float(y)
    return y


def _clamped(params: MLPParams, features: Sequence[Any]) -> Any:
    x = ad.stack([*features], axis=-1)
    out = ad.clamp(mlp_forward(params, x), -LLR_CLAMP, LLR_CLAMP)
    return float(out) if isinstance(out, np.ndarray) and out.ndim == 0 else out


def neural_fn_update_extrinsic(
    params: MLPParams,
    llr_ext: Any,
    coupling: Any,
    side: Optional[Iterable[Any]] = None,
) -> Any:
    """Learned extrinsic factor rule on features [L_ext, E_nm, side...]."""
    return _clamped(params, [llr_ext, coupling, *(side or ())])


def neural_fn_update(
    params: MLPParams,
    llr_ext: Any,
    llr_intr: Any,
    share_src: Any,
    coupling: Any,
    share_dst: Any,
    side: Optional[Iterable[Any]] = None,
) -> Any:
    """Learned non-extrinsic rule.

    Features are [L_ext, L_intr, s_src, E_nm, s_dst, side...].
    """
    return _clamped(
        params, [llr_ext, llr_intr, share_src, coupling, share_dst, *(side or ())]
    )


def save_params(params: MLPParams, path: str) -> None:
    lines = [f"MLP n_in={params.n_in} h={HIDDEN_UNITS}"]
    for name, t in params.tensors():
        lines.append(" ".join([name] + [format(v, ".17g") for v in t.ravel()]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_params(path: str) -> MLPParams:
    with open(path, "r") as f:
        lines = f.read().splitlines()

    if not lines:
        raise ParseError("empty model file", 1)
    header = _HEADER.match(lines[0].strip())
    if header is None:
        raise ParseError(f"bad header {lines[0]!r}", 1)
    if int(header.group("h")) != HIDDEN_UNITS:
        raise ParseError(f"hidden width must be {HIDDEN_UNITS}", 1)

    shapes = _shapes(int(header.group("n_in")))
    tensors = {}
    for i, name in enumerate(_TENSORS, start=2):
        if i > len(lines):
            raise ParseError(f"unexpected end of file, expected {name}", i)
        tag, *fields = lines[i - 1].split()
        if tag != name:
            raise ParseError(f"expected tensor {name}, found {tag!r}", i)
        try:
            values = np.array([float(v) for v in fields])
        except ValueError as e:
            raise ParseError(str(e), i) from e
        shape = shapes[name]
        if values.size != int(np.prod(shape)):
            raise ParseError(
                f"{name} needs {int(np.prod(shape))} values, found {values.size}", i
            )
        if not np.all(np.isfinite(values)):
            raise ParseError(f"{name} has non-finite values", i)
        tensors[name] = values.reshape(shape)

    if any(line.strip() for line in lines[len(_TENSORS) + 1 :]):
        raise ParseError("trailing content", len(_TENSORS) + 2)

    return MLPParams(**tensors)


def finite_difference_gradient(
    f: Callable[[MLPParams], float],
    params: MLPParams,
    coordinates: Iterable[int],
    h: Optional[float] = 1e-5,
) -> np.ndarray:
    """Central differences of ``f`` along the given flat parameter coordinates."""
    flat = params.flatten()
    grads = []
    for i in coordinates:
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        grads.append((f(params.unflatten(up)) - f(params.unflatten(down))) / (2 * h))
    return np.array(grads)
