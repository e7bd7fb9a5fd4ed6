import time

import numpy as np
import pytest

from tacnet.clock import VirtualClock
from tacnet.device import protocol as P
from tacnet.device.emulator import DeviceConfig, DeviceEmulator
from tacnet.device.fifo import FlashFifo
from tacnet.device.records import decode_record, encode_record
from tacnet.device.transport import (DeviceServer, DirectoryRegistry, InProcessLink,
                                     InProcessRegistry, SocketTransport)
from tacnet.physio import Observation


def obs(t, ppm=0.0, rh=40.0):
    return Observation(float(t), 0.0, 0.0, ppm, rh, 25.0, 0.0, None)


def quiet(**kw):
    kw.setdefault("noise_clean_counts", 0.0)
    kw.setdefault("noise_on_body_counts", 0.0)
    return DeviceEmulator(DeviceConfig(fifo_capacity_bytes=16 * 4096, **kw))


def run(dev, seconds, ppm=0.0, t0=0):
    for t in range(t0, t0 + seconds):
        dev.tick(obs(t, ppm))


def talk(dev, frame):
    dev.receive(frame.encode())
    return P.FrameDecoder().feed(dev.drain())


def test_first_record_after_a_minute():
    dev = quiet()
    run(dev, 59)
    assert dev.records_written == 0
    run(dev, 1, t0=59)
    (rec,) = dev.fifo.records()
    assert rec.rec_id == 0 and rec.rec_type == 1
    assert rec.v1 == pytest.approx(273.0)


def test_noise_free_level_tracks_slope():
    dev = quiet()
    run(dev, 600, ppm=1.0)
    last = dev.fifo.records()[-1]
    # gain 7 keeps 1 ppm in band; quantization at gain 7 is 0.35 reference counts
    assert dev.gain_index == 7
    assert last.v1 == pytest.approx(273 + 185.0, abs=0.35 / 2 + 1e-6)


def test_gap_minute_consumes_an_id():
    dev = quiet()
    run(dev, 60)
    dev.acquiring = False
    run(dev, 60, t0=60)
    dev.acquiring = True
    run(dev, 60, t0=120)
    assert [r.rec_id for r in dev.fifo.records()] == [0, 2]
    assert dev.info().latest_id == 2


def test_minute_noise_matches_configured_sigma():
    dev = DeviceEmulator(DeviceConfig(seed=3, noise_on_body_counts=0.0))
    run(dev, 300 * 60, ppm=10.0)
    v = np.array([r.v1 for r in dev.fifo.records()][2:])
    assert np.std(v, ddof=1) == pytest.approx(5.8, rel=0.15)
    assert np.mean(v) == pytest.approx(273 + 1850, abs=2.0)


def test_subscription_pushes_each_tick():
    dev = quiet()
    (ack,) = talk(dev, P.Frame(P.SUBSCRIBE, 5))
    assert ack == P.ack_frame(P.SUBSCRIBE, 5)
    run(dev, 3, ppm=1.0)
    pushes = P.FrameDecoder().feed(dev.drain())
    assert [f.seq for f in pushes] == [0, 1, 2]
    assert all(f.opcode == P.MEASUREMENT for f in pushes)
    assert dev.pushes_sent == 3
    talk(dev, P.Frame(P.UNSUBSCRIBE, 6))
    run(dev, 3, t0=3)
    assert dev.drain() == b""


def test_flash_read_dump_matches_fifo():
    dev = quiet()
    run(dev, 600)
    frames = talk(dev, P.flash_read_frame(3, 7))
    assert frames[0].opcode == P.DUMP_BEGIN
    assert P.parse_dump_begin(frames[0].payload) == (3, 7, 5)
    data = [f.payload for f in frames[1:-1]]
    assert data == [encode_record(r) for r in dev.fifo.read_range(3, 7)]
    assert [decode_record(d).rec_id for d in data] == [3, 4, 5, 6, 7]


def test_flash_read_naks():
    dev = quiet()
    (nak,) = talk(dev, P.flash_read_frame(0, 1))
    assert P.parse_nak(nak.payload) == (P.FLASH_READ, P.ERR_NOT_RETAINED, None)
    run(dev, 300)
    (nak,) = talk(dev, P.flash_read_frame(100, 200))
    assert P.parse_nak(nak.payload) == (P.FLASH_READ, P.ERR_NOT_RETAINED, (0, 4))
    (nak,) = talk(dev, P.flash_read_frame(4, 2))
    assert P.parse_nak(nak.payload)[1] == P.ERR_BAD_RANGE
    (nak,) = talk(dev, P.Frame(0x42, 9))
    assert P.parse_nak(nak.payload)[:2] == (0x42, P.ERR_UNKNOWN_OPCODE) and nak.seq == 9
    (nak,) = talk(dev, P.Frame(P.FLASH_READ, 1, b"\x00"))
    assert P.parse_nak(nak.payload)[1] == P.ERR_BAD_LENGTH
    dev.receive(bytes((P.GET_INFO, 4, 40)))
    (nak,) = P.FrameDecoder().feed(dev.drain())
    assert P.parse_nak(nak.payload)[:2] == (P.GET_INFO, P.ERR_BAD_LENGTH)


def test_info_and_time_ref():
    dev = quiet(name="TAC-07")
    run(dev, 180)
    asm = P.InfoAssembler()
    infos = [asm.add(f) for f in talk(dev, P.Frame(P.GET_INFO))]
    assert infos[-1] == P.DeviceInfo("TAC-07", P.FIRMWARE_VERSION, 2, 0, 3)
    (ack,) = talk(dev, P.Frame(P.SET_TIME_REF, 2, bytes(8)))
    assert ack.opcode == P.ACK


def test_disconnect_drops_subscription_and_outbox():
    dev = quiet()
    talk(dev, P.Frame(P.SUBSCRIBE))
    run(dev, 5)
    dev.disconnect()
    assert dev.outbox_len == 0 and not dev.subscribed
    run(dev, 5, t0=5)
    assert dev.drain() == b""


def test_restart_resumes_ids_from_flash(tmp_path):
    path = tmp_path / "flash.bin"
    with FlashFifo(path, 16 * 1024) as f:
        dev = DeviceEmulator(DeviceConfig(noise_clean_counts=0), f)
        run(dev, 180)
    with FlashFifo(path, 16 * 1024) as f:
        dev = DeviceEmulator(DeviceConfig(noise_clean_counts=0), f)
        run(dev, 60)
        assert [r.rec_id for r in f.records()] == [0, 1, 2, 3]


def test_in_process_link_throttles_and_closes():
    dev = quiet()
    run(dev, 600)
    link = InProcessLink(dev, frames_per_recv=2)
    link.send(P.flash_read_frame(0, 9).encode())
    assert len(P.FrameDecoder().feed(link.recv())) == 2
    link.close()
    assert link.recv() == b""
    with pytest.raises(ConnectionError):
        link.send(b"\x01\x00\x00")
    reg = InProcessRegistry()
    reg.add(dev)
    (entry,) = reg.entries()
    assert entry.name == "TAC-01" and entry.address == "inproc:TAC-01"


def test_tcp_server_round_trip(tmp_path):
    dev = quiet(name="TAC-09")
    registry = DirectoryRegistry(tmp_path / "reg")
    observations = (obs(t, 1.0) for t in range(10**6))
    with DeviceServer(dev, observations, VirtualClock(acceleration=2000.0), registry=registry):
        (entry,) = registry.entries()
        assert entry.name == "TAC-09"
        tr = entry.connect()
        assert isinstance(tr, SocketTransport)
        time.sleep(0.2)
        tr.send(P.Frame(P.GET_INFO).encode())
        dec, asm, info = P.FrameDecoder(), P.InfoAssembler(), None
        deadline = time.monotonic() + 5
        while info is None and time.monotonic() < deadline:
            for f in dec.feed(tr.recv(0.1)):
                if f.opcode == P.INFO:
                    info = asm.add(f)
        assert info is not None and info.name == "TAC-09"
        assert info.record_count >= 1
        tr.close()
    assert registry.entries() == []


def test_directory_registry_skips_bad_files(tmp_path):
    reg = DirectoryRegistry(tmp_path)
    (tmp_path / "broken.json").write_text("{")
    reg.register("TAC-02", "127.0.0.1", 9)
    assert [e.name for e in reg.entries()] == ["TAC-02"]
    with pytest.raises(ConnectionError):
        DirectoryRegistry(tmp_path / "missing").entries()


def test_flash_read_100_records_bit_identical():
    dev = quiet()
    run(dev, 110 * 60, ppm=0.5)
    frames = talk(dev, P.flash_read_frame(5, 104))
    data = [f.payload for f in frames if f.opcode == P.DUMP_DATA]
    assert len(data) == 100
    assert data == [encode_record(r) for r in dev.fifo.read_range(5, 104)]
    assert all(len(f.encode()) <= P.MTU for f in frames)


def _session_bytes(seed):
    dev = DeviceEmulator(DeviceConfig(seed=seed, fifo_capacity_bytes=16 * 1024))
    out = bytearray()
    dev.receive(P.Frame(P.SUBSCRIBE).encode())
    for t in range(300):
        dev.tick(obs(t, ppm=2.0 * (t > 100)))
        out += dev.drain()
    dev.receive(P.flash_read_frame(0, 4).encode())
    dev.receive(P.Frame(P.GET_INFO, 1).encode())
    return bytes(out + dev.drain())


def test_same_trace_same_byte_stream():
    a = _session_bytes(4)
    assert a == _session_bytes(4)
    assert a != _session_bytes(5)


def test_dump_does_not_stop_the_stream():
    dev = quiet()
    run(dev, 300)
    talk(dev, P.Frame(P.SUBSCRIBE))
    link = InProcessLink(dev, frames_per_recv=3)
    dec = P.FrameDecoder()
    link.send(P.flash_read_frame(0, 4).encode())
    got = []
    for t in range(300, 310):
        dev.tick(obs(t))
        got += dec.feed(link.recv())
    while True:
        chunk = link.recv()
        if not chunk:
            break
        got += dec.feed(chunk)
    ops = [f.opcode for f in got]
    assert ops.count(P.MEASUREMENT) == 10 == dev.pushes_sent
    assert [f.seq for f in got if f.opcode == P.MEASUREMENT] == list(range(10))
    assert ops.count(P.DUMP_DATA) == 5 and ops.count(P.DUMP_END) == 1
