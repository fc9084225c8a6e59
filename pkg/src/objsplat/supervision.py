"""Dense identity-feature targets from per-view object masks and a global codebook."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import Codebook, DimensionError, load_tensor, save_tensor


@dataclass
class MaskBundle:
    """K soft masks for one view and their K x C mask-to-code probabilities."""

    masks: np.ndarray
    gamma: np.ndarray
    view_id: int = 0

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.masks.ndim != 3 or self.gamma.ndim != 2 or self.masks.shape[0] != self.gamma.shape[0]:
            raise DimensionError(f"masks {self.masks.shape} and gamma {self.gamma.shape} disagree on K")

    @property
    def K(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]

    def validate(self, atol: float = 1e-5) -> None:
        if np.any(self.masks < 0) or np.any(self.masks > 1):
            raise ValueError("mask values must lie in [0, 1]")
        if np.any(self.masks.sum(axis=0) > 1 + atol):
            raise ValueError("masks overlap: per-pixel mask sum exceeds 1")
        if np.any(self.gamma < 0) or np.any(np.abs(self.gamma.sum(axis=1) - 1) > atol):
            raise ValueError("gamma rows must be non-negative and sum to 1")

    def save(self, directory, stem: str) -> None:
        save_tensor(self.masks, Path(directory) / f"{stem}.masks.gstn")
        save_tensor(self.gamma, Path(directory) / f"{stem}.gamma.gstn")

    @classmethod
    def load(cls, directory, stem: str, view_id: int = 0) -> "MaskBundle":
        return cls(
            load_tensor(Path(directory) / f"{stem}.masks.gstn"),
            load_tensor(Path(directory) / f"{stem}.gamma.gstn"),
            view_id,
        )


@dataclass
class SlotState:
    s_ext: np.ndarray
    gamma_logits: np.ndarray
    s_bck: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.s_ext = np.atleast_2d(np.asarray(self.s_ext, dtype=np.float64))
        self.gamma_logits = np.atleast_2d(np.asarray(self.gamma_logits, dtype=np.float64))
        self.s_bck = np.asarray(self.s_bck, dtype=np.float64).reshape(-1)
        if self.s_ext.shape[0] != self.gamma_logits.shape[0]:
            raise DimensionError("s_ext and gamma_logits disagree on K")


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def gumbel_intrinsic(state: SlotState, codebook: Codebook, hard: bool = False,
                     noise_seed: int | None = 0) -> np.ndarray:
    """Intrinsic slot features: Gumbel-softmax over the identity logits times the codebook.

    ``noise_seed=None`` draws no Gumbel noise. With ``hard`` the forward value is
    the one-hot of the perturbed argmax, so every output row is a codebook row.
    """
    if state.temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = state.gamma_logits
    if not np.all(np.isfinite(logits)):
        raise ValueError("identity logits must be finite")
    if logits.shape[1] != codebook.C:
        raise DimensionError(f"logits have {logits.shape[1]} codes, codebook has {codebook.C}")
    if noise_seed is None:
        noisy = logits
    else:
        noisy = logits + np.random.default_rng(noise_seed).gumbel(size=logits.shape)
    if hard:
        y = np.zeros_like(noisy)
        y[np.arange(len(y)), np.argmax(noisy, axis=1)] = 1.0
    else:
        y = _softmax(noisy / state.temperature, axis=1)
    return y @ codebook.codes


def build_full_slots(s_int: np.ndarray, state: SlotState) -> np.ndarray:
    """Stack ``[s_int | s_ext]`` object slots over the background slot: (K + 1) x D_slot."""
    s_int = np.atleast_2d(np.asarray(s_int, dtype=np.float64))
    if s_int.shape[0] != state.s_ext.shape[0]:
        raise DimensionError(f"s_int has {s_int.shape[0]} slots, s_ext has {state.s_ext.shape[0]}")
    d_slot = s_int.shape[1] + state.s_ext.shape[1]
    if state.s_bck.shape[0] != d_slot:
        raise DimensionError(f"background slot has width {state.s_bck.shape[0]}, expected {d_slot}")
    return np.vstack([np.hstack([s_int, state.s_ext]), state.s_bck[None]])


def select_code(gamma: np.ndarray, codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Most probable code per mask (lowest index on ties) and its codebook row.

    Returns ``(indices (K,), features (K, D))``.
    """
    gamma = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
    if gamma.size == 0:
        raise ValueError("gamma is empty")
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    if gamma.shape[1] != codebook.C:
        raise DimensionError(f"gamma has {gamma.shape[1]} columns, codebook has {codebook.C} codes")
    idx = np.argmax(gamma, axis=1)
    return idx, codebook.codes[idx]


def build_target(bundle: MaskBundle, codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Blend each mask's selected code into a dense H x W x D target.

    Slots are accumulated in a canonical order (code index, then mask bytes), so
    the result does not depend on slot order, bit for bit. Pixels whose total
    mask mass is at most 0.5 are uncovered and get the background code instead.
    """
    codes, feats = select_code(bundle.gamma, codebook)
    live = [k for k in range(bundle.K) if np.any(bundle.masks[k] != 0)]
    live.sort(key=lambda k: (int(codes[k]), bundle.masks[k].tobytes()))
    h, w = bundle.shape
    target = np.zeros((h, w, codebook.d_code))
    total = np.zeros((h, w))
    for k in live:
        m = bundle.masks[k]
        target += m[..., None] * feats[k]
        total += m
    covered = total > 0.5
    target[~covered] = codebook.background_code
    return target, covered
