from .emulator import DeviceConfig, DeviceEmulator
from .fifo import FlashFifo
from .frontend import GainTable, SensorSample, acquire_tick, auto_gain, minute_average
from .records import FlashRecord, decode_record, encode_record

__all__ = [
    "DeviceConfig", "DeviceEmulator", "FlashFifo", "FlashRecord", "GainTable", "SensorSample",
    "acquire_tick", "auto_gain", "decode_record", "encode_record", "minute_average",
]
