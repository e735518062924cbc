"""MACs, CIO and MoC for the shipped network and a v1/v2 block comparison."""

from hardnet_dfus import BlockSpec, analyze, compare_blocks, load_config
from hardnet_dfus.cost import match_growth

net, _ = load_config("hardnetv2-53")
report = analyze(net, (1, 3, 512, 512))

by_part = {}
for row in report.rows:
    part = row.name.split(".")[0]
    macs, cio = by_part.get(part, (0, 0))
    by_part[part] = (macs + row.macs, cio + row.cio)
for part, (macs, cio) in by_part.items():
    print(f"{part:8} {macs / 1e9:8.3f} GMACs {cio / 1e6:8.3f} M CIO")
print(f"total    {report.macs / 1e9:8.3f} GMACs {report.cio / 1e6:8.3f} M CIO "
      f"MoC {report.moc:.2f} params {report.params:,}")

# tune v2 growth until its MACs match a v1 block, then compare data movement
for c0 in (64, 256, 1024):
    shape = (1, c0, 32, 32)
    v1 = BlockSpec("v1", 8, 14, 1.7)
    v2 = match_growth(v1, BlockSpec("v2", 9, 1), shape)
    rec = compare_blocks(v1, v2, shape)
    print(f"C0={c0:4d}  v1 g=14: cio {rec['cio_a']:>9,}   v2 g={v2.g}: cio {rec['cio_b']:>9,}"
          f"   macs ratio {rec['macs_b'] / rec['macs_a']:.3f}")
