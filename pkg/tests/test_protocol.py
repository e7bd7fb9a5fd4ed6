import struct
import zlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tacnet.device import protocol as P
from tacnet.errors import ProtocolError

from .oracles import pack_record


def hexs(frames):
    return [f.encode().hex(" ") for f in frames]


def test_info_golden():
    frames = P.info_frames(P.DeviceInfo("TAC-01", (1, 0), 5, 0, 6))
    assert hexs(frames) == ["81 00 11 14 00 01 00 05 00 00 00 06 00 00 00 01 06 54 41 43",
                            "81 01 03 2d 30 31"]
    asm = P.InfoAssembler()
    assert asm.add(frames[0]) is None
    assert asm.add(frames[1]) == P.DeviceInfo("TAC-01", (1, 0), 5, 0, 6)


def test_request_and_push_goldens():
    assert P.flash_read_frame(3, 5).encode().hex(" ") == "04 00 04 03 00 05 00"
    assert P.measurement_frame(7, 1340.5, 26.5, 60.0).encode().hex(" ") == \
        "90 07 0c 00 90 a7 44 00 00 d4 41 00 00 70 42"
    nak = P.nak_frame(P.FLASH_READ, P.ERR_NOT_RETAINED, 0, (100, 200))
    assert nak.encode().hex(" ") == "ff 00 07 04 03 01 64 00 c8 00"
    assert P.parse_nak(nak.payload) == (P.FLASH_READ, 3, (100, 200))
    assert P.parse_nak(P.nak_frame(9, 1).payload) == (9, 1, None)


def test_dump_golden_and_crc_oracle():
    rec = pack_record(1, 2, 1.5, 25.0, 50.0)
    frames = P.dump_frames(2, 2, [rec])
    assert hexs(frames) == ["82 00 08 02 00 02 00 01 00 00 00",
                            "83 00 10 01 00 02 00 00 00 c0 3f 00 00 c8 41 00 00 48 42",
                            "84 01 0a 5a 17 d0 12 01 00 00 00 00 00"]
    crc, count = P.parse_dump_end(frames[-1].payload)
    assert crc == zlib.crc32(rec) and count == 1


@given(st.lists(st.binary(min_size=16, max_size=16), max_size=300))
def test_dump_structure(recs):
    frames = P.dump_frames(0, 1, recs)
    assert P.parse_dump_begin(frames[0].payload) == (0, 1, len(recs))
    assert [f.seq for f in frames[1:-1]] == [k & 0xFF for k in range(len(recs))]
    assert b"".join(f.payload for f in frames[1:-1]) == b"".join(recs)
    assert P.parse_dump_end(frames[-1].payload) == (zlib.crc32(b"".join(recs)), len(recs))
    assert frames[-1].seq == len(recs) & 0xFF


names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), max_size=40)


@given(names, st.one_of(st.none(), st.integers(0, 65535)), st.integers(0, 2**32 - 1))
def test_info_round_trip(name, latest, count):
    name = name.encode("utf-8")[:200].decode("utf-8", "ignore")
    info = P.DeviceInfo(name, (1, 0), latest, None if latest is None else 0, count)
    frames = P.info_frames(info)
    assert all(len(f.encode()) <= P.MTU for f in frames)
    asm = P.InfoAssembler()
    out = [asm.add(f) for f in frames]
    assert out[:-1] == [None] * (len(frames) - 1)
    assert out[-1] == info


def test_info_out_of_order():
    frames = P.info_frames(P.DeviceInfo("TAC-LONG-NAME-0001", (1, 0), 1, 0, 2))
    with pytest.raises(ProtocolError):
        P.InfoAssembler().add(frames[1])
    with pytest.raises(ProtocolError):
        P.parse_info(b"\x05\x00" + bytes(14))


def test_frame_limits():
    with pytest.raises(ProtocolError):
        P.Frame(P.INFO, 0, bytes(18))
    with pytest.raises(ProtocolError):
        P.Frame(256)
    assert len(P.Frame(P.INFO, 0, bytes(17)).encode()) == P.MTU


@given(st.binary(max_size=200), st.integers(0, 255))
def test_segment_reassembles(msg, seq0):
    frames = P.segment(P.INFO, msg, seq0)
    assert b"".join(f.payload for f in frames) == msg
    assert [f.seq for f in frames] == [(seq0 + k) & 0xFF for k in range(len(frames))]
    assert all(len(f.payload) <= P.MAX_PAYLOAD for f in frames)


frames_st = st.builds(P.Frame, st.integers(0, 255), st.integers(0, 255), st.binary(max_size=17))


@given(st.lists(frames_st, max_size=30), st.data())
def test_decoder_any_chunking(frames, data):
    stream = b"".join(f.encode() for f in frames)
    cuts = sorted(data.draw(st.lists(st.integers(0, len(stream)), max_size=10)))
    dec = P.FrameDecoder()
    got, prev = [], 0
    for c in cuts + [len(stream)]:
        got += dec.feed(stream[prev:c])
        prev = c
    assert got == frames
    assert dec.pending == 0 and not dec.malformed


def test_decoder_drops_on_bad_length():
    dec = P.FrameDecoder()
    good = P.ack_frame(P.SUBSCRIBE, 3).encode()
    assert dec.feed(good + bytes((0x04, 9, 18)) + b"junk") == [P.ack_frame(P.SUBSCRIBE, 3)]
    assert dec.malformed == [(0x04, 9, 18)]
    assert dec.pending == 0
    assert dec.feed(good) == [P.ack_frame(P.SUBSCRIBE, 3)]


def test_measurement_round_trip_is_float32():
    f = P.measurement_frame(300, 0.1, 25.0, 40.0)
    assert f.seq == 300 & 0xFF
    a, t, rh = P.parse_measurement(f.payload)
    assert a == struct.unpack("<f", struct.pack("<f", 0.1))[0]
    assert (t, rh) == (25.0, 40.0)
