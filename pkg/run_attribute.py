import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click

import settings
from experiment import (command_errors, common_options, configure_logging, load_config, make_view, open_dataset,
                        open_model, progress, select_samples, targets_for)
from metrics import phase_spread, total_variation
from nn_models import display_name
from reports import save_overlay, save_pgm, save_signed_png, write_rows, write_summary
from saliency import attribute_in_batches
from tensor_io import save_tensor


def _spread(reduced):
    h, w = reduced.shape[-2:]
    return phase_spread(reduced) if h % 2 == 0 and w % 2 == 0 else float("nan")


@click.command(name="attribute")
@common_options("config", "model", "dataset", "mode", "method", "layer", "target", "ig_steps", "smoothgrad_n",
                "smoothgrad_sigma", "reduce_mode", "samples", "seed", "out", "literal_rolls", "verbose")
def main(config_path, verbose, **flags):
    """Saliency maps per sample and layer: raw .stns, PGM, signed PNG and overlay."""
    configure_logging(verbose)
    cfg = load_config(config_path, require=("model", "dataset"), **flags)
    model = open_model(cfg.model)
    dataset = open_dataset(cfg.dataset)
    out = Path(cfg.out)
    with command_errors():
        layers = [model.resolve(layer) for layer in cfg.layers] or [settings.INPUT_LAYER]
        view = make_view(model, cfg.mode, cfg)
        indices = select_samples(dataset, cfg.samples, cfg.seed)
        images, labels = dataset.images[indices], dataset.labels[indices]
        targets = targets_for(model, labels, cfg.target)
        pictures = dataset.stats.denormalize(images)
        rows = []
        for i, layer in enumerate(layers, 1):
            progress(i, len(layers), f"Processing {layer} ({cfg.method}, {view.mode})")
            maps = attribute_in_batches(view, images, cfg.request(layer), targets)
            name = display_name(maps.layer)
            for k, index in enumerate(indices):
                sample = maps.sample(k)
                stem = out / name / f"{int(index):05d}"
                save_tensor(sample.raw, stem.with_name(stem.name + "_raw.stns"))
                save_pgm(sample.rendered, stem.with_name(stem.name + "_map.pgm"))
                save_signed_png(sample.rendered, stem.with_name(stem.name + "_signed.png"))
                save_overlay(pictures[k], sample.rendered, stem.with_name(stem.name + "_overlay.png"))
                rows.append({
                    "sample": int(index), "label": int(labels[k]), "target": sample.target, "layer": maps.layer,
                    "display": name, "tv": total_variation(sample.raw), "phase_spread": _spread(sample.reduced),
                })
        write_rows(out / "rows.csv", rows)
        write_summary(out / "summary.json", {"samples": len(indices), "mode": view.mode, "method": cfg.method},
                      cfg.seed, cfg.to_dict(), layers=layers, reduce_mode=cfg.reduce_mode,
                      smoothgrad=cfg.smoothgrad is not None)
    click.echo(f"Wrote {len(rows)} maps to {out}")


if __name__ == '__main__':
    main()
