import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canids.canlog import (
    CanMessage,
    LogFormatError,
    format_message,
    hamming_profile,
    load_log,
    parse_line,
    payload_dynamics,
    read_log,
    save_log,
    stream_stats,
    write_log,
)


def test_parse_line_example():
    m = parse_line("(1.000000) can0 386#0102030405060708")
    assert (m.timestamp, m.aid, m.data) == (1.0, 0x386, bytes(range(1, 9)))


def test_empty_payload():
    m = parse_line("(0.000000) can0 080#")
    assert m.dlc == 0 and m.aid == 0x80


@pytest.mark.parametrize("line", ["(0.000000) can0 080#ABC", "(0.0) can0 080#00", "garbage", "(1.000000) can0 1234#00",
                                  "(1.000000) can0 080#000000000000000000"])
def test_bad_lines(line):
    with pytest.raises(LogFormatError):
        parse_line(line, lineno=7)


def test_error_carries_line_number():
    with pytest.raises(LogFormatError, match="3"):
        list(read_log(["(0.000000) can0 080#00", "", "(0.000001) can0 080#0"]))


def test_format_example():
    assert format_message(CanMessage(1_500_000, 0x123, b"\xff")) == "(1.500000) can0 123#FF\n"


def test_empty_write():
    assert list(write_log([])) == []


messages = st.builds(
    CanMessage,
    timestamp_us=st.integers(0, 10**13),
    aid=st.integers(0, 0x7FF),
    data=st.binary(min_size=0, max_size=8),
    iface=st.sampled_from(["can0", "vcan1"]),
)


@given(st.lists(messages, max_size=20))
def test_read_write_identity(msgs):
    msgs = sorted(msgs, key=lambda m: m.timestamp_us)
    assert list(read_log(write_log(msgs))) == msgs


def test_save_load(tmp_path, short_drive):
    p = tmp_path / "x.log"
    save_log(p, short_drive.log[:500])
    assert load_log(p) == short_drive.log[:500]


def test_stream_stats_examples():
    log = [CanMessage(0, 1, b"A"), CanMessage(10_000, 1, b"A"), CanMessage(20_000, 1, b"B"), CanMessage(5, 2, b"")]
    by = {s.aid: s for s in stream_stats(log)}
    assert by[1].mean_dt == pytest.approx(0.01) and by[1].std_dt == pytest.approx(0.0, abs=1e-15)
    assert by[1].unique_payloads == 2
    assert by[2].mean_dt is None


def test_stream_stats_with_database(short_drive):
    by = {s.aid: s for s in stream_stats(short_drive.log, short_drive.db)}
    assert by[0x386].signal_count == len(short_drive.db.messages[0x386].signals)
    assert by[0x386].mean_dt == pytest.approx(0.02, rel=0.01)


def test_stream_stats_permutation_independent(short_drive):
    log = short_drive.log[:3000]
    mine = [m for m in log if m.aid == 0x316]
    others = [m for m in log if m.aid != 0x316]
    a = {s.aid: s for s in stream_stats(log)}[0x316]
    b = {s.aid: s for s in stream_stats(mine + others)}[0x316]
    c = {s.aid: s for s in stream_stats(mine)}[0x316]
    assert a == b == c


def _stream(payloads):
    return [CanMessage(i, 7, bytes(p)) for i, p in enumerate(payloads)]


def test_hamming_examples():
    assert not hamming_profile(_stream([[0], [0], [0]]), 7).flip_rate.any()
    d = hamming_profile(_stream([[0], [1]]), 7).flip_rate
    assert d[0] == 1.0 and d.sum() == 1.0
    d = hamming_profile(_stream([[0b00], [0b11], [0b00]]), 7).flip_rate
    assert list(d[:2]) == [1.0, 1.0] and d[2:].sum() == 0


@given(st.binary(min_size=1, max_size=8), st.integers(2, 50))
def test_constant_stream_has_zero_dynamics(payload, n):
    assert hamming_profile(_stream([payload] * n), 7).total == 0


@given(st.lists(st.binary(min_size=4, max_size=4), min_size=2, max_size=30))
def test_hamming_matches_pairwise_count(payloads):
    d = hamming_profile(_stream(payloads), 7).flip_rate
    bits = [np.unpackbits(np.frombuffer(p, np.uint8), bitorder="little") for p in payloads]
    flips = sum((a != b).astype(float) for a, b in zip(bits, bits[1:]))
    assert np.array_equal(d, flips / (len(payloads) - 1))
    assert ((0 <= d) & (d <= 1)).all()


def test_hamming_errors():
    with pytest.raises(ValueError):
        hamming_profile(_stream([[0]]), 7)
    with pytest.raises(ValueError):
        hamming_profile(_stream([[0], [0, 0]]), 7)


def test_payload_dynamics_sums_profiles(short_drive):
    dyn = payload_dynamics(short_drive.log)
    assert dyn.total == pytest.approx(sum(p.total for p in dyn.profiles.values()))
    assert set(dyn.profiles) == set(short_drive.db.messages)
