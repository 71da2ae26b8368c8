"""Minimal dense-vector neural network core.

Everything here operates on float64 numpy arrays and is sized for the tiny
two-layer blocks this package needs: explicit forward/backward passes, SELU
and tanh activations, alpha-dropout, He initialization, Huber/MSE losses,
and an Adam optimizer with decoupled weight decay. Inputs may be a single
vector ``(D,)`` or a batch ``(B, D)``.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericsError, TrainingError

# Self-normalizing activation constants (Klambauer et al. 2017).
SELU_ALPHA = 1.6732632423543772848170429916717
SELU_LAMBDA = 1.0507009873554804934193349852946

# Value dropped units are set to under alpha-dropout: the negative
# saturation point of SELU.
_ALPHA_PRIME = -SELU_LAMBDA * SELU_ALPHA

ACTIVATIONS = ("identity", "selu", "tanh")


def selu(x):
    """SELU applied elementwise; scalar in, scalar out."""
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def activate(name: str, x):
    if name == "identity":
        return np.asarray(x, dtype=np.float64)
    if name == "selu":
        return selu(x)
    if name == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def activate_deriv(name: str, x):
    """Derivative of the activation evaluated at pre-activation ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if name == "identity":
        return np.ones_like(x)
    if name == "selu":
        return SELU_LAMBDA * np.where(
            x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0))
        )
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    raise ValueError(f"unknown activation {name!r}")


def alpha_dropout(v, rate: float, rng, train: bool):
    """Alpha-dropout that preserves the self-normalizing regime.

    Dropped units are set to the SELU saturation value and the result is
    rescaled affinely so mean and variance are kept in expectation. In
    inference mode, or at rate 0, this is the identity.

    Returns ``(out, dmult)`` where ``dmult`` is the elementwise multiplier
    to apply to an upstream gradient (all ones outside training).
    """
    v = np.asarray(v, dtype=np.float64)
    if not train or rate == 0.0:
        return v, None
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    a = (keep + _ALPHA_PRIME**2 * keep * rate) ** -0.5
    b = -a * rate * _ALPHA_PRIME
    mask = rng.random(v.shape) < keep
    out = a * np.where(mask, v, _ALPHA_PRIME) + b
    return out, a * mask


def he_init(shape, fan_in: int, rng) -> np.ndarray:
    """Normal He initialization: i.i.d. N(0, 2/fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def mse_loss(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def huber_loss(pred, target, delta: float = 1.0) -> float:
    """Mean-reduced Huber loss: quadratic inside ``|e| <= delta``, linear outside."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    e = np.abs(pred - target)
    per = np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))
    return float(np.mean(per))


def huber_grad(pred, target, delta: float = 1.0) -> np.ndarray:
    """d(huber_loss)/d(pred), including the 1/n mean factor."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    e = pred - target
    return np.clip(e, -delta, delta) / e.size


class TwoLayerBlock:
    """A two-layer feed-forward block: ``out = sigma(W2 @ phi(W1 @ x + b1) + b2)``.

    Alpha-dropout (when ``dropout_rate > 0``) is applied after each
    activation in training mode only. Biases exist only when the block was
    built with ``bias=True``.
    """

    def __init__(self, w1, b1, w2, b2, phi="selu", sigma="selu", dropout_rate=0.0):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b1 = None if b1 is None else np.asarray(b1, dtype=np.float64)
        self.b2 = None if b2 is None else np.asarray(b2, dtype=np.float64)
        self.phi = phi
        self.sigma = sigma
        self.dropout_rate = float(dropout_rate)
        m, d = self.w1.shape
        k, m2 = self.w2.shape
        if m2 != m:
            raise ValueError(f"layer widths disagree: w1 is {m}x{d}, w2 is {k}x{m2}")
        if (self.b1 is None) != (self.b2 is None):
            raise ValueError("biases must be present for both layers or neither")
        if self.b1 is not None and (self.b1.shape != (m,) or self.b2.shape != (k,)):
            raise ValueError("bias shapes do not match layer widths")

    @classmethod
    def new(cls, in_dim, hidden_dim, out_dim, rng, phi="selu", sigma="selu",
            bias=True, dropout_rate=0.0):
        """He-initialized block; biases start at zero."""
        if min(in_dim, hidden_dim, out_dim) < 1:
            raise ValueError("all block dimensions must be >= 1")
        w1 = he_init((hidden_dim, in_dim), in_dim, rng)
        w2 = he_init((out_dim, hidden_dim), hidden_dim, rng)
        b1 = np.zeros(hidden_dim) if bias else None
        b2 = np.zeros(out_dim) if bias else None
        return cls(w1, b1, w2, b2, phi=phi, sigma=sigma, dropout_rate=dropout_rate)

    @property
    def bias_enabled(self) -> bool:
        return self.b1 is not None

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "TwoLayerBlock":
        return TwoLayerBlock(
            self.w1.copy(),
            None if self.b1 is None else self.b1.copy(),
            self.w2.copy(),
            None if self.b2 is None else self.b2.copy(),
            phi=self.phi, sigma=self.sigma, dropout_rate=self.dropout_rate,
        )

    def params(self) -> dict:
        out = {"w1": self.w1, "w2": self.w2}
        if self.b1 is not None:
            out["b1"] = self.b1
            out["b2"] = self.b2
        return out

    def forward(self, x, train=False, rng=None):
        """Run the block; returns ``(out, cache)``.

        ``cache`` holds what :meth:`backward` needs. Output layout follows
        the input: ``(D,) -> (K,)``, ``(B, D) -> (B, K)``.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.shape[1] != self.in_dim:
            raise ValueError(
                f"input width {xb.shape[1]} does not match block input {self.in_dim}"
            )
        if train and self.dropout_rate > 0.0 and rng is None:
            raise ValueError("training with dropout requires an rng")

        pre1 = xb @ self.w1.T
        if self.b1 is not None:
            pre1 = pre1 + self.b1
        act1 = activate(self.phi, pre1)
        act1, dmul1 = alpha_dropout(act1, self.dropout_rate, rng, train)

        pre2 = act1 @ self.w2.T
        if self.b2 is not None:
            pre2 = pre2 + self.b2
        out = activate(self.sigma, pre2)
        out, dmul2 = alpha_dropout(out, self.dropout_rate, rng, train)

        if not np.all(np.isfinite(out)):
            raise NumericsError("two-layer block produced a non-finite output")
        cache = (xb, pre1, act1, dmul1, pre2, dmul2, single)
        return (out[0] if single else out), cache

    def backward(self, cache, dout):
        """Backpropagate ``dout`` through the cached forward pass.

        Returns ``(dx, grads)`` with ``grads`` keyed like :meth:`params`.
        """
        xb, pre1, act1, dmul1, pre2, dmul2, single = cache
        d = np.asarray(dout, dtype=np.float64)
        if single:
            d = d[None, :]
        if dmul2 is not None:
            d = d * dmul2
        delta2 = d * activate_deriv(self.sigma, pre2)
        grads = {"w1": None, "w2": delta2.T @ act1}
        if self.b2 is not None:
            grads["b2"] = delta2.sum(axis=0)
        dact1 = delta2 @ self.w2
        if dmul1 is not None:
            dact1 = dact1 * dmul1
        delta1 = dact1 * activate_deriv(self.phi, pre1)
        grads["w1"] = delta1.T @ xb
        if self.b1 is not None:
            grads["b1"] = delta1.sum(axis=0)
        dx = delta1 @ self.w1
        return (dx[0] if single else dx), grads


class Adam:
    """Adam with decoupled weight decay.

    Parameters are passed as name -> array dicts; moment estimates and the
    per-parameter step counter are kept here, keyed by name, so a parameter
    that joins late (e.g. after an unfreeze) starts with fresh moments.
    Frozen parameters are simply never passed in.
    """

    def __init__(self, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state = {}

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place from ``grads``."""
        for name in params:
            p = params[name]
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            m, v, t = self._state.get(name, (np.zeros_like(p), np.zeros_like(p), 0))
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1**t)
            vhat = v / (1.0 - self.beta2**t)
            p -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)
            self._state[name] = (m, v, t)
