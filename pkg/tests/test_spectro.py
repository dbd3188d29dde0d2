import math

import numpy as np
import pytest

from ofdmaseg.channel import apply_cfo
from ofdmaseg.spectro import (StftConfig, cfo_row_shift, from_image, make_mask, spectrogram_image, stft,
                              to_image)
from ofdmaseg.waveform import FrameSpec, IqSignal, ModClass, RbAllocation, partition_grid, synthesize


def _dft_column(x, m, cfg):
    """Direct-sum oracle for one STFT column, rows fftshifted."""
    seg = x[m * cfg.window_shift: m * cfg.window_shift + cfg.window_len]
    n = np.arange(cfg.window_len)
    col = np.array([np.sum(seg * np.exp(-2j * np.pi * f * n / cfg.fft_len)) for f in range(cfg.fft_len)])
    return np.roll(col, cfg.fft_len // 2)


def test_column_count_formula_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        j = int(rng.integers(1, 64))
        k = int(rng.integers(1, 20))
        length = int(rng.integers(j, 600))
        cfg = StftConfig(fft_len=64, window_len=j, window_shift=k)
        # count windows that fit, one by one
        expect = sum(1 for m in range(length) if m * k + j <= length)
        assert cfg.n_columns(length) == expect
        assert stft(np.zeros(length, complex), cfg).shape == (64, expect)


def test_default_geometry():
    assert StftConfig().n_columns(2648) == 300
    assert StftConfig().span(300) == 2648


def test_constant_signal_hits_dc_row():
    s = stft(np.ones(2648, complex)).values
    assert s.shape == (256, 300)
    np.testing.assert_allclose(s[128], 256.0, atol=1e-9)
    assert np.max(np.abs(np.delete(s, 128, axis=0))) < 1e-9


def test_pure_tone_row():
    x = np.exp(2j * np.pi * 32 * np.arange(2648) / 256)
    s = stft(x).values
    np.testing.assert_allclose(np.abs(s[160]), 256.0, atol=1e-9)
    assert np.max(np.abs(np.delete(s, 160, axis=0))) < 1e-9


def test_matches_direct_dft_with_zero_padding():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(100) + 1j * rng.standard_normal(100)
    cfg = StftConfig(fft_len=16, window_len=12, window_shift=3)
    s = stft(x, cfg).values
    for m in (0, 5, s.shape[1] - 1):
        np.testing.assert_allclose(s[:, m], _dft_column(x, m, cfg), atol=1e-10)


def test_linearity():
    rng = np.random.default_rng(2)
    x, y = (rng.standard_normal(2648) + 1j * rng.standard_normal(2648) for _ in range(2))
    a, b = 0.3 - 1.2j, 2.5
    lhs = stft(a * x + b * y).values
    rhs = a * stft(x).values + b * stft(y).values
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_shift_by_k_moves_one_column():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(2648) + 1j * rng.standard_normal(2648)
    y = np.concatenate([np.zeros(8, complex), x[:-8]])
    sx, sy = stft(x).values, stft(y).values
    assert np.max(np.abs(sy[:, 1:] - sx[:, :-1])) < 1e-9


def test_short_signal_rejected():
    with pytest.raises(ValueError):
        stft(np.zeros(255, complex))


def test_blank_image_encoding():
    img, s = to_image(np.zeros((256, 300), complex))
    assert s == 1.0
    assert np.all(img[0] == 128) and np.all(img[1] == 128) and np.all(img[2] == 0)


def test_single_cell_encoding():
    z = np.zeros((4, 4), complex)
    z[1, 2] = 3.0
    img, s = to_image(z)
    assert s == 3.0
    assert tuple(img[:, 1, 2]) == (255, 128, 180)
    z[0, 0] = -3.0j
    img, _ = to_image(z)
    assert tuple(img[:, 0, 0]) == (128, 0, 180)


def test_decode_within_quantisation_bound():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((256, 300)) + 1j * rng.standard_normal((256, 300))
    img, s = to_image(z)
    back = from_image(img, s)
    assert np.max(np.abs(back.real - z.real)) <= s / 255 + 1e-12
    assert np.max(np.abs(back.imag - z.imag)) <= s / 255 + 1e-12


def test_non_finite_rejected():
    z = np.zeros((4, 4), complex)
    z[0, 0] = np.nan
    with pytest.raises(ValueError):
        to_image(z)


def test_mask_whole_grid_qpsk():
    spec = FrameSpec()
    mask = make_mask(spec, [RbAllocation(0, 64, 0, 37, ModClass.QPSK)])
    assert mask.shape == (256, 300)
    # last column centre 299*8+128 = 2520 < 2664: every column is in frame
    assert np.all(mask == int(ModClass.QPSK))


def test_mask_all_nodata():
    mask = make_mask(FrameSpec(), [RbAllocation(0, 64, 0, 37, ModClass.NoData)])
    assert not np.any(mask)


def test_mask_subcarrier_rows_and_symbol_columns():
    spec = FrameSpec()
    for k in (-32, -1, 0, 5, 31):
        i = k + 32
        alloc = [RbAllocation(i, i + 1, 3, 4, ModClass.BPSK)]
        mask = make_mask(spec, alloc)
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        expect_rows = np.arange(128 + 4 * k - 2, 128 + 4 * k + 2) % 256
        assert sorted(rows) == sorted(expect_rows)
        # columns whose centre sample m*8+128 falls in symbol 3 = samples [216, 288)
        assert list(cols) == [m for m in range(300) if 216 <= m * 8 + 128 < 288]


def test_mask_tracks_cfo_bins():
    spec = FrameSpec()
    alloc = partition_grid(64, 37, seed=8)
    base = make_mask(spec, alloc)
    assert cfo_row_shift(78_125.0, 20e6) == 1
    shifted = make_mask(spec, alloc, cfo_hz=2 * 78_125.0 + 1000)
    assert np.array_equal(shifted, np.roll(base, 2, axis=0))
    assert np.array_equal(make_mask(spec, alloc, cfo_hz=-78_125.0), np.roll(base, -1, axis=0))


def test_cfo_tracking_follows_spectrum():
    spec = FrameSpec()
    alloc = [RbAllocation(40, 48, 0, 37, ModClass.QPSK), RbAllocation(0, 40, 0, 37, ModClass.NoData),
             RbAllocation(48, 64, 0, 37, ModClass.NoData)]
    cfo = 3 * 78_125.0
    sig = apply_cfo(synthesize(spec, alloc, 1), cfo)
    energy = np.sum(np.abs(stft(IqSignal(sig.samples[:2648])).values) ** 2, axis=1)
    mask_rows = make_mask(spec, alloc, cfo).any(axis=1)
    assert energy[mask_rows].sum() / energy.sum() > 0.9


def _single_block(f0, f1, t0, t1, mod=ModClass.BPSK):
    rest = [RbAllocation(0, f0, 0, 37, ModClass.NoData), RbAllocation(f1, 64, 0, 37, ModClass.NoData),
            RbAllocation(f0, f1, 0, t0, ModClass.NoData), RbAllocation(f0, f1, t1, 37, ModClass.NoData)]
    return [RbAllocation(f0, f1, t0, t1, mod)] + [a for a in rest if a.area > 0]


def test_mask_energy_localisation():
    spec = FrameSpec()
    alloc = _single_block(0, 16, 0, 10)
    sig = synthesize(spec, alloc, 3)
    e = np.abs(stft(IqSignal(sig.samples[:2648])).values) ** 2
    mask = make_mask(spec, alloc) == int(ModClass.BPSK)
    assert e[mask].sum() / e.sum() >= 0.9


@pytest.mark.parametrize("box", [(8, 24, 2, 12), (30, 50, 10, 20), (40, 44, 20, 30)])
def test_mask_extent_matches_energy_extent(box):
    spec = FrameSpec()
    alloc = _single_block(*box)
    sig = synthesize(spec, alloc, 5)
    e = np.abs(stft(IqSignal(sig.samples[:2648])).values) ** 2
    mask = make_mask(spec, alloc) == int(ModClass.BPSK)
    # rows: spectral leakage falls off fast; columns: the window ramps linearly across block edges
    row_e, col_e = e.sum(axis=1), e.sum(axis=0)
    rows = np.nonzero(row_e >= 0.1 * row_e.max())[0]
    cols = np.nonzero(col_e >= 0.5 * col_e.max())[0]
    mr, mc = np.nonzero(mask)
    assert abs(rows.min() - mr.min()) <= 2 and abs(rows.max() - mr.max()) <= 2
    assert abs(cols.min() - mc.min()) <= 5 and abs(cols.max() - mc.max()) <= 5


def test_spectrogram_image_uses_first_span():
    spec = FrameSpec()
    sig = synthesize(spec, partition_grid(64, 37, seed=1), 1)
    img, s = spectrogram_image(sig)
    assert img.shape == (3, 256, 300) and img.dtype == np.uint8
    ref, s2 = to_image(stft(IqSignal(sig.samples[:2648])))
    assert s == s2 and np.array_equal(img, ref)
    assert math.isfinite(s)
