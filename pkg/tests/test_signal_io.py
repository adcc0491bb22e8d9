import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgbert.errors import DataError
from ecgbert.signal_io import (
    EcgRecord,
    decode_212,
    encode_212,
    read_csv,
    read_wfdb,
    resample,
    window,
    write_wfdb,
)

twelve_bit = st.integers(-2048, 2047)


def pack_pair_oracle(s0: int, s1: int) -> bytes:
    """Independent bit-layout encoder: pure integer arithmetic on one pair."""
    u0, u1 = s0 % 4096, s1 % 4096
    return bytes([u0 & 0xFF, (u0 >> 8) | ((u1 >> 8) << 4), u1 & 0xFF])


def header(fs="250", fmt="212", gain="200", n=0):
    return f"rec 1 {fs} {n}\nrec.dat {fmt} {gain}(0)/mV 12 0 0 0 0 II\n"


def test_zero_packing():
    rec = read_wfdb(header(), bytes([0, 0, 0]))
    assert rec.samples.tolist() == [0.0, 0.0]


def test_pair_100_minus_200_round_trip():
    data = encode_212([100, -200])
    assert data == pack_pair_oracle(100, -200)
    assert decode_212(data).tolist() == [100, -200]


@settings(max_examples=500)
@given(twelve_bit, twelve_bit)
def test_212_matches_oracle_and_round_trips(a, b):
    data = encode_212([a, b])
    assert data == pack_pair_oracle(a, b)
    assert decode_212(data).tolist() == [a, b]


def test_header_fs_125():
    assert read_wfdb(header(fs="125"), bytes(6)).fs == 125


def test_gain_scaling():
    rec = read_wfdb(header(gain="100"), encode_212([200, -50]))
    assert rec.samples.tolist() == [2.0, -0.5]


@pytest.mark.parametrize(
    "hdr,data",
    [
        (header(fmt="16"), bytes(6)),
        (header(), bytes(4)),
        (header(gain="0"), bytes(3)),
        (header(n=10), bytes(6)),
    ],
)
def test_wfdb_errors(hdr, data):
    with pytest.raises(DataError):
        read_wfdb(hdr, data)


def test_channel_out_of_range():
    with pytest.raises(DataError):
        read_wfdb(header(), bytes(3), channel=1)


def test_write_read_wfdb_round_trip():
    x = np.random.default_rng(0).integers(-2048, 2048, 101) / 200.0
    hdr, dat = write_wfdb(EcgRecord(x, 250, "r1"))
    back = read_wfdb(hdr, dat)
    assert back.fs == 250 and np.array_equal(back.samples, x)


def test_csv_basic_and_header():
    assert len(read_csv("0.0\n0.1\n", 250)) == 2
    assert read_csv("mv\r\n0.5\r\n1.5\r\n", 250).samples.tolist() == [0.5, 1.5]


@pytest.mark.parametrize("text", ["", "0.1\nnan\n", "0.1\nabc\n"])
def test_csv_errors(text):
    with pytest.raises(DataError):
        read_csv(text, 250)


def test_csv_2500_lines_gives_one_window():
    rec = read_csv("0.0\n" * 2500, 250)
    ws = window(rec)
    assert len(ws) == 1 and len(ws[0]) == 2500


def test_resample_identity_is_bitwise():
    x = np.random.default_rng(1).standard_normal(300)
    assert np.array_equal(resample(EcgRecord(x, 250), 250).samples, x)


def test_resample_length_and_sine():
    t = np.arange(5000) / 500.0
    out = resample(EcgRecord(np.sin(2 * np.pi * 5 * t), 500), 250)
    assert out.fs == 250 and len(out) == 2500
    ref = np.sin(2 * np.pi * 5 * np.arange(2500) / 250.0)
    assert np.max(np.abs(out.samples - ref)[50:-50]) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(100, 400), st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.sampled_from([(360, 250), (125, 250), (500, 250)]))
def test_resample_is_linear(n, a, rates):
    fs, target = rates
    x = np.random.default_rng(n).standard_normal(n)
    y1 = resample(EcgRecord(a * x, fs), target).samples
    y2 = a * resample(EcgRecord(x, fs), target).samples
    assert len(y1) == round(n * target / fs)
    assert np.allclose(y1, y2, rtol=1e-12, atol=1e-12 * np.abs(y2).max())


@pytest.mark.parametrize("seconds,expected", [(10, 1), (25, 2), (9.9, 0)])
def test_window_counts(seconds, expected):
    rec = EcgRecord(np.zeros(int(round(seconds * 250))), 250)
    assert len(window(rec)) == expected


@settings(max_examples=30)
@given(st.integers(0, 9000))
def test_windows_tile_a_prefix(n):
    x = np.arange(n, dtype=float)
    ws = window(EcgRecord(x, 250, "r")) if n else []
    assert all(len(w) == 2500 for w in ws)
    joined = np.concatenate([w.samples for w in ws]) if ws else np.zeros(0)
    assert np.array_equal(joined, x[: len(joined)])
    assert [w.start_sample for w in ws] == [2500 * i for i in range(len(ws))]


def test_record_rejects_non_finite():
    with pytest.raises(DataError):
        EcgRecord(np.array([0.0, np.inf]), 250)
