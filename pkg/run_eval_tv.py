import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click
import numpy as np

from denoise import HookMode
from experiment import (command_errors, common_options, configure_logging, load_config, make_view, open_dataset,
                        open_model, progress, select_samples, targets_for)
from metrics import evaluate_tv, percentage_reduction
from nn_models import display_name, hidden_layers
from reports import write_rows, write_summary


def reduction_table(reports):
    """Mean TV per (mode, method, layer) and its reduction against the original mode."""
    means = {(r.mode, r.method, r.layer): r.mean for r in reports}
    table = []
    for (mode, method, layer), value in means.items():
        original = means.get((HookMode.ORIGINAL.value, method, layer))
        table.append({
            "mode": mode, "method": method, "layer": layer, "display": display_name(layer), "mean_tv": value,
            "reduction_percent": percentage_reduction(original, value) if original is not None else float("nan"),
        })
    return table


def average_reductions(table):
    """Mean reduction over layers for every (mode, method)."""
    grouped = {}
    for row in table:
        if row["mode"] != HookMode.ORIGINAL.value:
            grouped.setdefault(f"{row['mode']}/{row['method']}", []).append(row["reduction_percent"])
    return {key: float(np.mean(values)) for key, values in grouped.items()}


@click.command(name="eval-tv")
@common_options("config", "model", "dataset", "modes", "methods", "layer", "target", "ig_steps", "smoothgrad_n",
                "smoothgrad_sigma", "samples", "seed", "out", "literal_rolls", "verbose")
def main(config_path, verbose, **flags):
    """Total variation of hidden-layer saliency under each hook mode."""
    configure_logging(verbose)
    cfg = load_config(config_path, require=("model", "dataset"), **flags)
    model = open_model(cfg.model)
    dataset = open_dataset(cfg.dataset)
    with command_errors():
        layers = [model.resolve(layer) for layer in cfg.layers] or hidden_layers(model)
        indices = select_samples(dataset, cfg.samples, cfg.seed)
        images = dataset.images[indices]
        targets = targets_for(model, dataset.labels[indices], cfg.target)
        modes = [HookMode.parse(mode).value for mode in cfg.modes]
        if HookMode.ORIGINAL.value not in modes:
            modes.insert(0, HookMode.ORIGINAL.value)

        reports, rows = [], []
        jobs = [(mode, method) for mode in modes for method in cfg.methods]
        for i, (mode, method) in enumerate(jobs, 1):
            progress(i, len(jobs), f"Processing {method} under {mode}")
            view = make_view(model, mode, cfg)
            for report in evaluate_tv(view, images, targets, cfg.request(method=method), layers):
                reports.append(report)
                rows += [{"mode": mode, "method": method, "layer": report.layer, "display": display_name(report.layer),
                          "sample": int(index), "tv": value} for index, value in zip(indices, report.values)]
        table = reduction_table(reports)
        write_rows(Path(cfg.out) / "rows.csv", rows)
        write_rows(Path(cfg.out) / "reduction.csv", table)
        write_summary(Path(cfg.out) / "summary.json", {
            "tv": {f"{r.mode}/{r.method}/{r.layer}": {"mean": r.mean, "std": r.std} for r in reports},
            "mean_reduction_percent": average_reductions(table),
        }, cfg.seed, cfg.to_dict(), layers=layers, reduce_mode=cfg.reduce_mode, smoothgrad=cfg.smoothgrad is not None)
    for key, value in average_reductions(table).items():
        click.echo(f"  {key}: {value:+.1f}% TV reduction")


if __name__ == '__main__':
    main()
