import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click
import numpy as np

from checkpoint import write_manifest
from denoise import ConvParams, RollSet, backward_hook, forward_hook
from experiment import command_errors, configure_logging
from metrics import phase_spread
from reports import save_pgm
from spatial_ops import conv2d
from tensor_core import Tape, backward, tensor_sum
from tensor_io import save_tensor

KERNEL = np.array([[[[1.0, 1.0], [1.0, -1.0]]]])


def checkerboard_gradients(size=16, rolls=None):
    """Input gradient of sum(conv2d(ones, k, stride 2)): plain, backward-hooked and forward-hooked."""
    rolls = rolls or RollSet()
    ones = np.ones((1, 1, size, size))

    tape = Tape()
    x = tape.watch(ones)
    plain = backward(tensor_sum(conv2d(x, KERNEL, stride=2)), tape).grad(x)

    tape = Tape()
    x = tape.watch(ones)
    hooked_forward = backward(tensor_sum(forward_hook(ConvParams(KERNEL, None, 2, 0), x, rolls)), tape).grad(x)

    return {
        "gradient": plain.data[0, 0],
        "backward_hook": backward_hook(plain, rolls).data[0, 0],
        "forward_hook": hooked_forward.data[0, 0],
    }


@click.command(name="demo-checkerboard")
@click.option("--size", default=16, show_default=True, type=int, help="Side of the all-ones input.")
@click.option("--out", default="out/demo_checkerboard", show_default=True, type=click.Path(file_okay=False))
@click.option("--literal-paper-rolls", "literal_rolls", is_flag=True,
              help="Backward hook rolls with the forward offsets.")
@click.option("--verbose", "-v", is_flag=True)
def main(size, out, literal_rolls, verbose):
    """Reproduce the stride-2 checkerboard gradient and both hooks that remove it."""
    configure_logging(verbose)
    out = Path(out)
    with command_errors():
        fields = checkerboard_gradients(size, RollSet.configured(literal_rolls))
        artifacts, spreads = [], {}
        total = len(fields)
        for i, (name, field) in enumerate(fields.items(), 1):
            click.echo(f"[{i}/{total}] Processing {name}")
            save_tensor(field, out / f"{name}.stns")
            save_pgm(field, out / f"{name}.pgm")
            artifacts += [f"{name}.stns", f"{name}.pgm"]
            spreads[name] = phase_spread(field)
            click.echo(f"  phase spread {spreads[name]:.6g}, values {np.unique(field).tolist()}")
        write_manifest(out / "manifest.json", {
            "size": size,
            "kernel": KERNEL[0, 0].tolist(),
            "stride": 2,
            "literal_rolls": bool(literal_rolls),
            "artifacts": artifacts,
            "phase_spread": spreads,
        })
    click.echo(f"Wrote {len(artifacts)} artifacts to {out}")


if __name__ == '__main__':
    main()
