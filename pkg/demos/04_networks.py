"""Layer tables and parameter counts of the discriminator and generator."""

from codetensor.neural import build_discriminator, build_generator

for build in (build_discriminator, build_generator):
    for profile in ("paper", "desk"):
        net = build(profile)
        print(f"{net.name} ({profile}): {net.n_params():,} parameters")
    rows = build("paper").shape_table()
    shown = rows if len(rows) < 25 else rows[:12] + [("...", ())] + rows[-8:]
    for kind, shape in shown:
        print(f"    {kind:10s} {'x'.join(map(str, shape))}")
