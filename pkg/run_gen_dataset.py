import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click

import settings
from experiment import command_errors, common_options, configure_logging, load_config
from shapes_dataset import generate_shapes, load_stats, save_dataset


@click.command(name="gen-dataset")
@common_options("config", "seed", "out", "verbose")
@click.option("--classes", type=int, help=f"Number of shape classes (2-{len(settings.SHAPE_CLASSES)}).")
@click.option("--count", type=int, help="Number of images.")
@click.option("--image-size", type=int)
@click.option("--stats-from", type=click.Path(file_okay=False),
              help="Normalize with the statistics of an existing dataset (e.g. the training split).")
def main(config_path, verbose, **flags):
    """Render the synthetic shapes dataset into --out."""
    configure_logging(verbose)
    cfg = load_config(config_path, **flags)
    with command_errors():
        stats = load_stats(cfg.stats_from) if cfg.stats_from else None
        classes = cfg.classes or len(settings.SHAPE_CLASSES)
        count = cfg.count or 1000
        click.echo(f"[1/2] Rendering {count} images, {classes} classes, seed {cfg.seed}")
        dataset = generate_shapes(classes, count, cfg.seed, cfg.image_size, stats)
        click.echo(f"[2/2] Writing {cfg.out}")
        save_dataset(dataset, cfg.out)
    click.echo(f"Normalization mean {dataset.stats.mean}, std {dataset.stats.std}")


if __name__ == '__main__':
    main()
