#!/usr/bin/env python3
"""Writes the wire-format golden files with Python's struct module."""
import struct
from pathlib import Path

HERE = Path(__file__).resolve().parent

PARTICLES = [
    dict(id=7, x=(0.125, 0.25, 0.5), v=(-1.0, 2.5, 0.0), u=1.5, m=0.001, h=0.0625,
         rho=3.25, omega=1.125, a_prev=(0.5, -0.25, 4.0), kicked=1),
    dict(id=2**40 + 3, x=(0.9, 1e-300, 0.3333333333333333), v=(1e10, -0.0, 7.0), u=2.0, m=0.002,
         h=0.1, rho=-0.0, omega=0.75, a_prev=(0.0, 0.0, 0.0), kicked=0),
]


def header(step, phase, cell, count, payload):
    return b"SWXM" + struct.pack("<HIBQII", 1, step, phase, cell, count, len(payload))


def density(p):
    return struct.pack("<9d", *p["x"], *p["v"], p["m"], p["h"], p["u"])


def force(p):
    return struct.pack("<3d", p["h"], p["rho"], p["omega"])


def full(p):
    return struct.pack("<Q", p["id"]) + struct.pack("<3d3d3d3d", *p["x"], *p["v"], p["u"], p["m"], p["h"],
                                                    *p["a_prev"]) + struct.pack("<B", p["kicked"])


CELL = (5 << 20) | 3
files = {
    "wire_density.bin": (42, 0, CELL, density),
    "wire_force.bin": (42, 1, CELL, force),
    "wire_migrate.bin": (9, 2, 5 << 20, full),
}
for name, (step, phase, cell, rec) in files.items():
    payload = b"".join(rec(p) for p in PARTICLES)
    (HERE / name).write_bytes(header(step, phase, cell, len(PARTICLES), payload) + payload)
# Migration marker from rank 3 announcing 4 data messages.
(HERE / "wire_marker.bin").write_bytes(header(9, 2, (1 << 63) | 3, 4, b""))
