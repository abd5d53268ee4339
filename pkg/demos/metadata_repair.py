"""Corrupt the metadata of a small density grid, look at what the halo
analysis sees, then let the diagnoser put it back."""
import struct

from faultfs.hdf5meta.parser import parse_file, read_dataset
from faultfs.hdf5meta.repair import diagnose_bytes, repair
from faultfs.hdf5meta.writer import write_dataset
from faultfs.toy import HaloSpec, generate_grid, halo_finder

grid = generate_grid((32, 32, 32), 7, HaloSpec(4, 12, 300.0, 0.5, 2))
good = write_dataset(grid, "f64")
model = parse_file(good)
print(f"{len(good)} bytes, metadata {model.metadata_size}, datatype at {model.datatype_offset}")


def show(label, data):
    halos = halo_finder(read_dataset(data))
    _, d = diagnose_bytes(data)
    print(f"{label:<14} mean={d.average:<12.6g} halos={len(halos)} "
          f"first={halos[0].centroid if halos else None}  -> {d.kind.value}")


show("golden", good)

# exponent bias 0x3FF -> 0x3F3: every value scaled by 2**12
bad = bytearray(good)
struct.pack_into("<I", bad, model.datatype_offset + 16, 0x3F3)
show("bias 0x3F3", bytes(bad))

# mantissa size 52 -> 50
bad_layout = bytearray(good)
bad_layout[model.datatype_offset + 15] = 50
show("mantissa 50", bytes(bad_layout))

# address of raw data pushed 64 bytes forward
bad_ard = bytearray(good)
struct.pack_into("<Q", bad_ard, model.layout.offset + 2, model.layout.address + 64)
show("ARD +64", bytes(bad_ard))

for label, data in (("bias", bad), ("layout", bad_layout), ("ARD", bad_ard)):
    r = repair(bytes(data))
    print(f"repair {label:<7} {'; '.join(r.actions)}  restored={r.data == good}")
