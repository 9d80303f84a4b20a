"""Training objectives: spectral MAE, SI-SDR and their weighted combination.

All functions accept numpy arrays or tensors; with tensors they are
differentiable on the active tape.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossConfig


class SilentReference(ValueError):
    pass


class MaeTerms(NamedTuple):
    ri: Tensor
    magnitude: Tensor

    @property
    def total(self) -> Tensor:
        return self.ri + self.magnitude


def mae_terms(est, target) -> MaeTerms:
    """RI and magnitude MAE terms between (..., 2) real/imag spectrograms.

    Both terms are normalized by the number of time-frequency bins M, so the
    RI term is (1/M) * sum(|dR| + |dI|): a unit error on both channels of
    every bin gives 2.
    """
    est, target = ad.as_tensor(est), ad.as_tensor(target)
    if est.shape != target.shape or est.shape[-1] != 2:
        raise ValueError(f"mae_loss: shapes {est.shape} and {target.shape} must match (..., 2)")
    bins = est.size // 2
    ri = ad.tabs(est - target).sum() * (1.0 / bins)
    mag_est = ad.hypot(est[..., 0], est[..., 1])
    mag_ref = ad.hypot(target[..., 0], target[..., 1])
    mag = ad.tabs(mag_est - mag_ref).sum() * (1.0 / bins)
    return MaeTerms(ri, mag)


def mae_loss(est, target) -> Tensor:
    return mae_terms(est, target).total


def si_sdr(est, ref, eps: float = 1e-8):
    """Scale-invariant SDR in dB (higher is better).

    alpha = <est, ref> / (|ref|^2 + eps) projects ``est`` onto ``ref``; no mean
    removal. Returns a float for array inputs and a scalar Tensor otherwise.
    """
    as_float = not isinstance(est, Tensor) and not isinstance(ref, Tensor)
    est, ref = ad.as_tensor(est), ad.as_tensor(ref)
    if est.shape != ref.shape or est.ndim != 1:
        raise ValueError(f"si_sdr needs equal-length 1-D signals, got {est.shape}, {ref.shape}")
    if est.size == 0:
        raise ValueError("si_sdr of empty signals")
    if not np.any(ref.data):
        raise SilentReference("si_sdr reference is all zeros")
    ref_energy = ad.square(ref).sum()
    alpha = (est * ref).sum() / (ref_energy + eps)
    target = ref * alpha
    num = ad.square(target).sum() + eps
    den = ad.square(target - est).sum() + eps
    value = ad.log10(num / den) * 10.0
    return float(value.data) if as_float else value


class JointTerms(NamedTuple):
    total: Tensor
    mae: Tensor
    sisdr: Tensor


def joint_terms(est_spec, target_spec, est_wav, target_wav,
                cfg: LossConfig = LossConfig()) -> JointTerms:
    mae = mae_loss(est_spec, target_spec)
    sd = si_sdr(est_wav, target_wav, cfg.sisdr_epsilon)
    sd = ad.as_tensor(sd)
    if cfg.w_sisdr == 0:
        total = mae * cfg.w_mae
    else:
        total = mae * cfg.w_mae - sd * cfg.w_sisdr
    return JointTerms(total, mae, sd)


def joint_loss(est_spec, target_spec, est_wav, target_wav, cfg: LossConfig = LossConfig()) -> Tensor:
    """w_mae * MAE - w_sisdr * SI-SDR; lower is better."""
    return joint_terms(est_spec, target_spec, est_wav, target_wav, cfg).total
