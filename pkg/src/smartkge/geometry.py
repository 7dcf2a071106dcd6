"""Elementwise geometric transformations in complex coordinates.

Vectors are ``complex128`` numpy arrays; every function broadcasts over
leading axes and reduces over the last one. Gradients with respect to a
complex quantity ``z`` are packed as ``dL/dRe(z) + 1j * dL/dIm(z)``.
"""

from __future__ import annotations

from enum import Enum, IntEnum

import numpy as np


class EGT(IntEnum):
    """The four transformations. The integer value is the storage column."""

    TRANS = 0
    ROT = 1
    REF = 2
    SCAL = 3

    @property
    def tag(self) -> str:
        return _TAGS[self]

    @classmethod
    def from_tag(cls, tag: str) -> "EGT":
        try:
            return _FROM_TAG[tag.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown EGT {tag!r}; expected one of Trans, Rot, Ref, Scal") from None


_TAGS = {EGT.TRANS: "Trans", EGT.ROT: "Rot", EGT.REF: "Ref", EGT.SCAL: "Scal"}
_FROM_TAG = {
    **{v.lower(): k for k, v in _TAGS.items()},
    "translation": EGT.TRANS,
    "rotation": EGT.ROT,
    "reflection": EGT.REF,
    "scaling": EGT.SCAL,
}

DEFAULT_ORDER: tuple[EGT, ...] = (EGT.TRANS, EGT.ROT, EGT.REF, EGT.SCAL)


def parse_order(text: str | tuple[EGT, ...] | list) -> tuple[EGT, ...]:
    """Parse ``"Trans,Rot,Ref,Scal"`` (or a sequence) into a validated ordering."""
    items = text.split(",") if isinstance(text, str) else list(text)
    order = tuple(item if isinstance(item, EGT) else EGT.from_tag(item) for item in items)
    if sorted(order) != sorted(EGT):
        raise ValueError(f"EGT order must be a permutation of Trans, Rot, Ref, Scal; got {text!r}")
    return order


def format_order(order: tuple[EGT, ...]) -> str:
    return ",".join(e.tag for e in order)


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a)[-1:] != np.shape(b)[-1:]:
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def apply_translation(u, h):
    _check_dims(u, h)
    return h + u


def apply_rotation(theta, h):
    _check_dims(theta, h)
    return np.exp(1j * theta) * h


def apply_reflection(phi, h):
    # matrix [[cos 2phi, sin 2phi], [sin 2phi, -cos 2phi]] acting on (Re, Im)
    _check_dims(phi, h)
    return np.exp(2j * phi) * np.conj(h)


def apply_scaling(s, h):
    _check_dims(s, h)
    return s * h


_FORWARD = {
    EGT.TRANS: apply_translation,
    EGT.ROT: apply_rotation,
    EGT.REF: apply_reflection,
    EGT.SCAL: apply_scaling,
}


def unit_phasor(kind: EGT, params):
    """``e^{i theta}`` for rotations, ``e^{2i phi}`` for reflections."""
    if kind is EGT.ROT:
        return np.exp(1j * params)
    if kind is EGT.REF:
        return np.exp(2j * params)
    raise ValueError(f"{kind!r} has no phasor")


def apply_egt(kind: EGT, params, h, unit=None):
    """Forward map; ``unit`` optionally supplies a precomputed phasor."""
    if unit is None or kind in (EGT.TRANS, EGT.SCAL):
        return _FORWARD[kind](params, h)
    if kind is EGT.ROT:
        return unit * h
    return unit * np.conj(h)


def egt_distance(x, t, p: int = 2):
    """Norm of ``x - t`` over the last axis using complex moduli."""
    _check_dims(x, t)
    mod = np.abs(x - t)
    if p == 2:
        return np.sqrt(np.sum(mod * mod, axis=-1))
    if p == 1:
        return np.sum(mod, axis=-1)
    raise ValueError(f"norm order must be 1 or 2, got {p}")


def distance_and_grad(x, t, p: int = 2):
    """Distance and its gradient with respect to ``x``.

    Exact zeros (whole vector for p=2, per coordinate for p=1) get a zero
    subgradient.
    """
    diff = x - t
    sq = diff.real * diff.real + diff.imag * diff.imag
    if p == 2:
        dist = np.sqrt(np.sum(sq, axis=-1))
        inv = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)
        grad = diff * inv[..., None]
    elif p == 1:
        mod = np.sqrt(sq)
        dist = np.sum(mod, axis=-1)
        grad = diff * np.divide(1.0, mod, out=np.zeros_like(mod), where=mod > 0)
    else:
        raise ValueError(f"norm order must be 1 or 2, got {p}")
    return dist, grad


def backprop_egt(kind: EGT, params, h, x, g, unit=None):
    """Pull ``g = dL/dx`` back through ``x = apply_egt(kind, params, h)``.

    Returns ``(grad_params, grad_h)``; angle and scale gradients are real.
    """
    if kind is EGT.TRANS:
        return g, g
    if kind is EGT.SCAL:
        return g.real * h.real + g.imag * h.imag, params * g
    if unit is None:
        unit = unit_phasor(kind, params)
    # Re(conj(g) * i * x)
    turn = g.imag * x.real - g.real * x.imag
    if kind is EGT.ROT:
        return turn, np.conj(unit) * g
    if kind is EGT.REF:
        # x depends on conj(h); dx/dphi = 2i x
        return 2.0 * turn, unit * np.conj(g)
    raise ValueError(f"unknown EGT {kind!r}")


def egt_gradients(kind: EGT, params, h, t, p: int = 2):
    """Gradients of ``egt_distance(apply_egt(kind, params, h), t, p)``.

    Returns ``(grad_params, grad_h, grad_t)``.
    """
    x = apply_egt(kind, params, h)
    _, g = distance_and_grad(x, t, p)
    grad_params, grad_h = backprop_egt(kind, params, h, x, g)
    return grad_params, grad_h, -g


class Closure(str, Enum):
    SAME = "same-EGT"
    OTHER = "other-EGT"
    NOT_EGT = "not-EGT"


_T, _R, _F, _S = EGT.TRANS, EGT.ROT, EGT.REF, EGT.SCAL

# (a, b) -> (kind of a∘b or None, a∘b == b∘a)
_COMPOSITION = {
    (_T, _T): (_T, True), (_T, _R): (None, False), (_T, _F): (None, False), (_T, _S): (None, False),
    (_R, _T): (None, False), (_R, _R): (_R, True), (_R, _F): (_F, False), (_R, _S): (None, True),
    (_F, _T): (None, False), (_F, _R): (_F, False), (_F, _F): (_R, False), (_F, _S): (None, True),
    (_S, _T): (None, False), (_S, _R): (None, True), (_S, _F): (None, True), (_S, _S): (_S, True),
}


def compose_check(a: EGT, b: EGT) -> tuple[Closure, EGT | None, bool]:
    """Classify ``a∘b``: closure class, resulting EGT (if any), commutativity."""
    result, commutes = _COMPOSITION[(EGT(a), EGT(b))]
    if result is None:
        closure = Closure.NOT_EGT
    elif result == a == b:
        closure = Closure.SAME
    else:
        closure = Closure.OTHER
    return closure, result, commutes


def inverse_params(kind: EGT, params):
    """Parameters of the inverse map: (-u, -theta, phi, 1/s)."""
    if kind is EGT.TRANS:
        return -params
    if kind is EGT.ROT:
        return -params
    if kind is EGT.REF:
        return params
    if kind is EGT.SCAL:
        return 1.0 / params
    raise ValueError(f"unknown EGT {kind!r}")


def wrap_angle(theta):
    """Map angles into (-pi, pi] for reporting."""
    wrapped = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)
