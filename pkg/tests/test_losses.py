import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccdn import autodiff as ad
from ccdn.autodiff import Tensor
from ccdn.config import LossConfig
from ccdn.losses import SilentReference, joint_loss, joint_terms, mae_loss, mae_terms, si_sdr

from conftest import GRAD_EPS


def si_sdr_oracle(est, ref, eps=1e-8):
    alpha = np.dot(est, ref) / (np.dot(ref, ref) + eps)
    t = alpha * ref
    return 10 * np.log10((np.dot(t, t) + eps) / (np.dot(t - est, t - est) + eps))


def mae_oracle(est, ref):
    m = est.shape[0] * est.shape[1]
    ri = np.abs(est - ref).sum() / m
    mag = np.abs(np.hypot(est[..., 0], est[..., 1]) - np.hypot(ref[..., 0], ref[..., 1])).sum() / m
    return ri + mag


def orthogonal_pair(rng, n, ratio):
    ref = rng.standard_normal(n)
    e = rng.standard_normal(n)
    e -= np.dot(e, ref) / np.dot(ref, ref) * ref
    e *= np.sqrt(np.dot(ref, ref) / (ratio * np.dot(e, e)))
    return ref, e


def test_mae_zero_for_identical(rng):
    s = rng.standard_normal((3, 5, 2))
    assert mae_loss(s, s).item() == 0.0


def test_mae_unit_offset_ri_term_is_two(rng):
    s = rng.standard_normal((3, 5, 2))
    assert mae_terms(s + 1.0, s).ri.item() == pytest.approx(2.0, abs=1e-15)


def test_mae_single_bin():
    est = np.zeros((2, 3, 2))
    est[1, 2] = (3.0, 4.0)
    terms = mae_terms(est, np.zeros_like(est))
    assert terms.ri.item() == pytest.approx(7.0 / 6)
    assert terms.magnitude.item() == pytest.approx(5.0 / 6)
    assert terms.total.item() == pytest.approx(12.0 / 6)


def test_mae_matches_oracle(rng):
    a, b = rng.standard_normal((2, 4, 6, 2))
    assert mae_loss(a, b).item() == pytest.approx(mae_oracle(a, b), rel=1e-14)


def test_mae_shape_mismatch():
    with pytest.raises(ValueError):
        mae_loss(np.zeros((2, 3, 2)), np.zeros((2, 4, 2)))


def test_si_sdr_identical_is_capped_high(rng):
    x = rng.standard_normal(4000)
    assert si_sdr(x, x) >= 80.0
    assert si_sdr(2 * x, x) >= 80.0


def test_si_sdr_orthogonal_ten_db(rng):
    ref, e = orthogonal_pair(rng, 16000, 10.0)
    assert abs(si_sdr(ref + e, ref) - 10.0) < 1e-6


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.1, 10.0), seed=st.integers(0, 2**31 - 1))
def test_si_sdr_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    ref, e = orthogonal_pair(rng, 8000, 10.0)
    est = ref + e
    base = si_sdr(est, ref)
    assert abs(si_sdr(est, c * ref) - base) < 1e-6
    assert abs(si_sdr(c * est, ref) - base) < 1e-6


def test_si_sdr_matches_oracle(rng):
    ref, est = rng.standard_normal((2, 1000))
    assert si_sdr(est, ref) == pytest.approx(si_sdr_oracle(est, ref), abs=1e-12)


def test_si_sdr_errors():
    with pytest.raises(SilentReference):
        si_sdr(np.ones(10), np.zeros(10))
    with pytest.raises(ValueError):
        si_sdr(np.ones(10), np.ones(11))


def test_si_sdr_tensor_gradient(rng):
    ref = rng.standard_normal(64)
    est = Tensor(ref + 0.3 * rng.standard_normal(64), requires_grad=True)
    assert ad.finite_difference_check(lambda t: si_sdr(t, ref), est, GRAD_EPS) < 1e-6


def _case(rng, t=3, f=9):
    spec_t = rng.standard_normal((t, f, 2))
    spec_e = spec_t + 0.2 * rng.standard_normal((t, f, 2))
    wav_t = rng.standard_normal(64)
    wav_e = wav_t + 0.2 * rng.standard_normal(64)
    return spec_e, spec_t, wav_e, wav_t


def test_joint_is_mae_minus_si_sdr(rng):
    se, st_, we, wt = _case(rng)
    want = mae_oracle(se, st_) - si_sdr_oracle(we, wt)
    assert joint_loss(se, st_, we, wt).item() == pytest.approx(want, rel=1e-12)


def test_joint_without_si_sdr_is_mae(rng):
    se, st_, we, wt = _case(rng)
    assert joint_loss(se, st_, we, wt, LossConfig(w_sisdr=0.0)).item() == mae_loss(se, st_).item()


def test_joint_weights(rng):
    se, st_, we, wt = _case(rng)
    t = joint_terms(se, st_, we, wt, LossConfig(w_mae=2.0, w_sisdr=0.5))
    assert t.total.item() == pytest.approx(2.0 * t.mae.item() - 0.5 * t.sisdr.item(), rel=1e-14)


def test_joint_minimum_at_perfect_estimate(rng):
    _, st_, _, wt = _case(rng)
    perfect = joint_terms(st_, st_, wt, wt)
    assert perfect.mae.item() == 0.0
    assert perfect.sisdr.item() >= 80.0
    for _ in range(10):
        d = 1e-3 * rng.standard_normal(st_.shape)
        w = 1e-3 * rng.standard_normal(wt.shape)
        assert joint_loss(st_ + d, st_, wt + w, wt).item() > perfect.total.item()


def test_joint_gradient(rng):
    se, st_, we, wt = _case(rng)
    spec = Tensor(se, requires_grad=True)
    wav = Tensor(we, requires_grad=True)
    assert ad.finite_difference_check(lambda t: joint_loss(t, st_, we, wt), spec, GRAD_EPS) < 1e-6
    assert ad.finite_difference_check(lambda t: joint_loss(se, st_, t, wt), wav, GRAD_EPS) < 1e-6


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(sisdr_epsilon=0.0)
    with pytest.raises(ValueError):
        LossConfig(w_mae=-1.0)
