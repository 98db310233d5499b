import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskdenoise.errors import FormatError, ValidationError
from taskdenoise.signal import (
    HEADER_SIZE,
    Trial,
    TrialSet,
    export_csv,
    import_csv,
    load_trialset,
    make_rng,
    save_trialset,
)


def _random_set(n=3, c=2, t=8, k=3, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, c, t)).astype(np.float32).astype(np.float64)
    return TrialSet(data, rng.integers(0, k, n), 250.0, k, "s1")


def test_header_is_fixed_size(tmp_path):
    ts = TrialSet(np.zeros((0, 8, 256)), np.zeros(0, int), 128.0, 2)
    p = tmp_path / "empty.bin"
    save_trialset(ts, p)
    assert p.stat().st_size == HEADER_SIZE == 32
    back = load_trialset(p)
    assert len(back) == 0 and back.n_channels == 8 and back.n_samples == 256


def test_one_trial_file_length(tmp_path):
    ts = TrialSet(np.ones((1, 2, 4)), [3], 100.0, 4)
    p = tmp_path / "one.bin"
    save_trialset(ts, p)
    assert p.stat().st_size == HEADER_SIZE + 4 + 2 * 4 * 4


def test_byte_layout(tmp_path):
    ts = TrialSet(np.arange(6, dtype=float).reshape(1, 2, 3), [1], 64.0, 2)
    p = tmp_path / "layout.bin"
    save_trialset(ts, p)
    raw = p.read_bytes()
    assert raw[:8] == b"TDNSIG01"
    assert struct.unpack_from("<5I", raw, 8) == (1, 1, 2, 3, 2)
    assert struct.unpack_from("<f", raw, 28)[0] == 64.0
    assert struct.unpack_from("<I", raw, 32)[0] == 1
    # channel-major sample order
    assert struct.unpack_from("<6f", raw, 36) == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)


def test_roundtrip_bitwise(tmp_path):
    ts = _random_set(n=5, c=3, t=17)
    p = tmp_path / "rt.bin"
    save_trialset(ts, p)
    back = load_trialset(p)
    np.testing.assert_array_equal(back.data, ts.data)
    np.testing.assert_array_equal(back.labels, ts.labels)
    assert back.fs == ts.fs and back.num_classes == ts.num_classes
    save_trialset(back, tmp_path / "rt2.bin")
    assert (tmp_path / "rt2.bin").read_bytes() == p.read_bytes()


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(0, 4),
    c=st.integers(1, 4),
    t=st.integers(2, 12),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(tmp_path_factory, n, c, t, seed):
    rng = np.random.default_rng(seed)
    data = (rng.standard_normal((n, c, t)) * 100).astype(np.float32).astype(np.float64)
    ts = TrialSet(data, rng.integers(0, 2, n), 512.0, 2)
    p = tmp_path_factory.mktemp("rt") / "x.bin"
    save_trialset(ts, p)
    back = load_trialset(p)
    np.testing.assert_array_equal(back.data.reshape(n, c, t), data)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    save_trialset(_random_set(), p)
    raw = bytearray(p.read_bytes())
    raw[:8] = b"XXXXXXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_trialset(p)


def test_bad_version(tmp_path):
    p = tmp_path / "v.bin"
    save_trialset(_random_set(), p)
    raw = bytearray(p.read_bytes())
    raw[8:12] = struct.pack("<I", 7)
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_trialset(p)


def test_truncated_mid_trial(tmp_path):
    p = tmp_path / "t.bin"
    save_trialset(_random_set(n=3, c=2, t=8), p)
    full = p.read_bytes()
    p.write_bytes(full[:-10])
    with pytest.raises(FormatError) as err:
        load_trialset(p)
    assert str(len(full)) in str(err.value) and str(len(full) - 10) in str(err.value)


def test_nan_payload_rejected(tmp_path):
    p = tmp_path / "nan.bin"
    save_trialset(_random_set(n=1, c=1, t=4), p)
    raw = bytearray(p.read_bytes())
    raw[HEADER_SIZE + 4 : HEADER_SIZE + 8] = struct.pack("<f", float("nan"))
    p.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        load_trialset(p)


def test_containers_reject_non_finite():
    with pytest.raises(ValidationError):
        Trial(np.array([[0.0, np.inf]]), 100.0)
    with pytest.raises(ValidationError):
        TrialSet(np.full((1, 1, 2), np.nan), [0], 100.0, 2)
    with pytest.raises(ValidationError):
        Trial(np.zeros((1, 1)), 100.0)
    with pytest.raises(ValidationError):
        TrialSet(np.zeros((1, 1, 4)), [2], 100.0, 2)


def test_trials_are_immutable():
    tr = Trial(np.zeros((2, 3)), 10.0)
    with pytest.raises(ValueError):
        tr.data[0, 0] = 1.0


def test_csv_zero_trial_line(tmp_path):
    ts = TrialSet(np.zeros((1, 1, 3)), [0], 10.0, 2)
    export_csv(ts, tmp_path)
    assert (tmp_path / "trial_0000.csv").read_text().strip() == "0,0,0"


def test_csv_roundtrip_and_labels(tmp_path):
    ts = _random_set(n=2, c=3, t=5)
    export_csv(ts, tmp_path)
    rows = (tmp_path / "labels.csv").read_text().strip().splitlines()
    assert rows[0] == "index,label" and len(rows) == 3
    back = import_csv(tmp_path)
    np.testing.assert_allclose(back.data, ts.data, rtol=1e-6)
    np.testing.assert_array_equal(back.labels, ts.labels)


def test_make_rng_streams():
    a = make_rng(5, 1, 2).standard_normal(4)
    b = make_rng(5, 1, 2).standard_normal(4)
    c = make_rng(5, 2, 1).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    make_rng(2**64 - 1)
    with pytest.raises(ValidationError):
        make_rng(-1)
