import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click

import settings
from denoise import HookMode, SurrogateTrainConfig, attach, save_surrogates, train_surrogates
from experiment import (command_errors, common_options, configure_logging, load_config, open_dataset, open_model,
                        targets_for)
from metrics import accuracy, prediction_difference
from nn_models import ModelView, display_name
from reports import write_rows, write_summary


@click.command(name="train-surrogate")
@common_options("config", "model", "dataset", "layer", "epochs", "lr", "batch_size", "seed", "out", "verbose")
def main(config_path, verbose, **flags):
    """Fit a bilinear surrogate for every eligible downsampling conv of --model.

    Surrogates are stored inside the checkpoint (surrogates/<layer-id>/); the
    per-epoch L1 log and the original-vs-surrogate comparison go to --out.
    """
    configure_logging(verbose)
    cfg = load_config(config_path, require=("model", "dataset"), **flags)
    model = open_model(cfg.model)
    dataset = open_dataset(cfg.dataset)
    with command_errors():
        train_cfg = SurrogateTrainConfig(epochs=cfg.epochs or settings.SURROGATE_EPOCHS,
                                         lr=cfg.lr or settings.SURROGATE_LR,
                                         batch_size=cfg.batch_size or settings.SURROGATE_BATCH_SIZE,
                                         seed=cfg.seed, layers=cfg.layers or None)
        click.echo(f"[1/3] Training surrogates for {train_cfg.epochs} epochs at lr {train_cfg.lr}")
        paths = train_surrogates(model, dataset, train_cfg)
        click.echo(f"[2/3] Saving {len(paths)} surrogates into {cfg.model}")
        save_surrogates(paths, cfg.model)

        click.echo("[3/3] Comparing original and surrogate predictions")
        original = ModelView(model)
        surrogate = attach(model, HookMode.SURROGATE, paths) if not cfg.layers else None
        rows = [dict(layer=layer_id, display=display_name(layer_id), **entry)
                for layer_id, path in paths.items() for entry in path.log]
        write_rows(Path(cfg.out) / "rows.csv", rows)
        results = {"final_l1": {layer_id: path.final_l1 for layer_id, path in paths.items()},
                   "accuracy_original": accuracy(original, dataset.images, dataset.labels)}
        if surrogate is not None:
            diff = prediction_difference(original, surrogate, dataset.images, targets_for(model, dataset.labels))
            results["accuracy_surrogate"] = accuracy(surrogate, dataset.images, dataset.labels)
            results["prediction_difference"] = diff.summary()
        write_summary(Path(cfg.out) / "summary.json", results, cfg.seed, cfg.to_dict(), layers=list(paths))
    for layer_id, path in paths.items():
        click.echo(f"  {layer_id}: final mean L1 {path.final_l1:.6f}")


if __name__ == '__main__':
    main()
