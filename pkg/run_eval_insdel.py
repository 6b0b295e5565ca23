import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click

import settings
from experiment import (command_errors, common_options, configure_logging, load_config, make_view, open_dataset,
                        open_model, progress, select_samples, targets_for)
from metrics import CurveConfig, curve_scores, evaluate_insdel, noise_saliency_batch
from nn_models import display_name, hidden_layers
from reports import write_curves, write_rows, write_summary
from seeding import stream


@click.command(name="eval-insdel")
@common_options("config", "model", "dataset", "mode", "methods", "layer", "target", "ig_steps", "smoothgrad_n",
                "smoothgrad_sigma", "steps", "samples", "seed", "out", "literal_rolls", "verbose")
@click.option("--curves", is_flag=True, help="Also write every curve to curves.csv.")
def main(config_path, verbose, curves, **flags):
    """Insertion and deletion AUC per layer and method, with a Gaussian-noise saliency baseline."""
    configure_logging(verbose)
    cfg = load_config(config_path, require=("model", "dataset"), **flags)
    model = open_model(cfg.model)
    dataset = open_dataset(cfg.dataset)
    with command_errors():
        view = make_view(model, cfg.mode, cfg)
        layers = [model.resolve(layer) for layer in cfg.layers] or [settings.INPUT_LAYER] + hidden_layers(model)
        indices = select_samples(dataset, cfg.samples, cfg.seed)
        images = dataset.images[indices]
        targets = targets_for(model, dataset.labels[indices], cfg.target)
        curve_cfg = CurveConfig(steps=cfg.steps)
        noise_rng = stream(cfg.seed, "noise-baseline")

        rows, curve_rows, summary = [], [], {}
        jobs = [(layer, method) for layer in layers for method in list(cfg.methods) + ["noise"]]
        for i, (layer, method) in enumerate(jobs, 1):
            progress(i, len(jobs), f"Processing {method} at {layer} ({view.mode})")
            if method == "noise":
                _, captured = view.forward(images[:1], capture=(layer,))
                noise = noise_saliency_batch(len(images), captured[layer].shape[2:], images.shape[2:], noise_rng)
                report = curve_scores(view, images, noise, targets, curve_cfg, keep_curves=curves)
            else:
                report = evaluate_insdel(view, images, targets, cfg.request(layer, method), curve_cfg,
                                         keep_curves=curves)
            labels = {"mode": view.mode, "method": method, "layer": layer, "display": display_name(layer)}
            summary[f"{method}/{layer}"] = report.summary()
            for k, index in enumerate(indices):
                rows.append(dict(labels, sample=int(index), insertion=report.insertion[k], deletion=report.deletion[k]))
                if curves:
                    curve_rows.append((dict(labels, sample=int(index), kind="insertion"), report.insertion_curves[k]))
                    curve_rows.append((dict(labels, sample=int(index), kind="deletion"), report.deletion_curves[k]))
        write_rows(Path(cfg.out) / "rows.csv", rows)
        if curves:
            write_curves(Path(cfg.out) / "curves.csv", curve_rows)
        write_summary(Path(cfg.out) / "summary.json", {"auc": summary, "curve": curve_cfg.to_dict()}, cfg.seed,
                      cfg.to_dict(), layers=layers, reduce_mode=cfg.reduce_mode, smoothgrad=cfg.smoothgrad is not None)
    for key, value in summary.items():
        click.echo(f"  {key}: insertion {value['insertion']['mean']:.4f}, deletion {value['deletion']['mean']:.4f}")


if __name__ == '__main__':
    main()
