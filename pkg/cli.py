import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click

import run_attribute
import run_demo_checkerboard
import run_eval_insdel
import run_eval_preddiff
import run_eval_tv
import run_gen_dataset
import run_randomize_test
import run_train
import run_train_surrogate

COMMANDS = (
    run_demo_checkerboard.main,
    run_gen_dataset.main,
    run_train.main,
    run_train_surrogate.main,
    run_attribute.main,
    run_eval_tv.main,
    run_eval_insdel.main,
    run_eval_preddiff.main,
    run_randomize_test.main,
)


@click.group()
def cli():
    """Checkerboard-free saliency maps: demo, data, training, attribution and evaluation."""


for command in COMMANDS:
    cli.add_command(command)


if __name__ == '__main__':
    cli()
