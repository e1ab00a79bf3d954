"""
Decoding CAN payloads with a signal database
=============================================

A DBC file describes where each signal sits inside an 8-byte payload, how
its raw bits map to a physical value, and which byte order it uses. This
walkthrough parses a small database, decodes a frame, writes values back,
and shows how little-endian and big-endian layouts differ.
"""

import numpy as np

from canids.dbc import parse_dbc
from canids.deserialize import decode_signal, deserialize_message, extract_bits, serialize_message

DBC = """
VERSION ""

BO_ 790 EMS1: 8 ECU
 SG_ ENG_SPEED : 16|16@1+ (0.25,0) [0|16383.75] "rpm" Vector__XXX
 SG_ COOLANT : 0|8@1+ (0.75,-48) [-48|143.25] "degC" Vector__XXX
 SG_ TORQUE : 39|12@0- (0.5,0) [-1024|1023.5] "Nm" Vector__XXX
"""

db = parse_dbc(DBC)
msg = db.messages[790]
for sig in msg.signals:
    print(f"{sig.name:10s} start={sig.start_bit:2d} len={sig.bit_length:2d} "
          f"{'intel' if sig.little_endian else 'motorola'} scale={sig.scale} offset={sig.offset}")

# Encode a physical state into a payload, then read it back.
payload = serialize_message([2150.0, 88.5, -37.5], msg)
print("payload", payload.hex(" "))
print("decoded", deserialize_message(790, payload, db))

# Motorola signals walk the payload MSB first in a sawtooth order.
torque = msg.signals[2]
print("torque bit positions", torque.bit_positions())
print("raw torque bits", extract_bits(payload, torque), "->", decode_signal(payload, torque), "Nm")

# Quantization: any value within the range survives a round trip to within
# half a scale step.
rng = np.random.default_rng(0)
worst = 0.0
for _ in range(1000):
    values = [rng.uniform(s.minimum, s.maximum) for s in msg.signals]
    back = deserialize_message(790, serialize_message(values, msg), db)
    worst = max(worst, max(abs(b - v) / abs(s.scale) for b, v, s in zip(back, values, msg.signals)))
print(f"worst round-trip error: {worst:.4f} x scale")
