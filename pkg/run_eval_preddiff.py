import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click

from denoise import HookMode
from experiment import (command_errors, common_options, configure_logging, load_config, make_view, open_dataset,
                        open_model, progress, select_samples, targets_for)
from metrics import accuracy, prediction_difference
from reports import write_rows, write_summary


@click.command(name="eval-preddiff")
@common_options("config", "model", "dataset", "modes", "samples", "seed", "out", "literal_rolls", "verbose")
@click.option("--all-samples", is_flag=True, help="Use the whole dataset instead of --samples.")
def main(config_path, verbose, all_samples, **flags):
    """Softmax prediction difference (x100) and accuracy of each hook mode against the original model."""
    configure_logging(verbose)
    cfg = load_config(config_path, require=("model", "dataset"), **flags)
    model = open_model(cfg.model)
    dataset = open_dataset(cfg.dataset)
    with command_errors():
        indices = select_samples(dataset, len(dataset) if all_samples else cfg.samples, cfg.seed)
        images, labels = dataset.images[indices], dataset.labels[indices]
        targets = targets_for(model, labels)
        original = make_view(model, HookMode.ORIGINAL, cfg)
        variants = [HookMode.parse(mode) for mode in cfg.modes if HookMode.parse(mode) is not HookMode.ORIGINAL]

        results = {"accuracy": {HookMode.ORIGINAL.value: accuracy(original, images, labels)}, "difference": {}}
        rows = []
        for i, mode in enumerate(variants, 1):
            progress(i, len(variants), f"Processing {mode.value}")
            view = make_view(model, mode, cfg)
            report = prediction_difference(original, view, images, targets)
            results["accuracy"][mode.value] = accuracy(view, images, labels)
            results["difference"][mode.value] = report.summary()
            rows += [{"mode": mode.value, "sample": int(index), "all_classes": report.all_classes[k],
                      "target_class": report.target_class[k]} for k, index in enumerate(indices)]
        write_rows(Path(cfg.out) / "rows.csv", rows)
        write_summary(Path(cfg.out) / "summary.json", results, cfg.seed, cfg.to_dict())
    for mode, summary in results["difference"].items():
        click.echo(f"  {mode}: all classes {summary['all_classes']['mean']:.3f} "
                   f"± {summary['all_classes']['std']:.3f}, target {summary['target_class']['mean']:.3f}, "
                   f"accuracy {results['accuracy'][mode]:.4f} (original {results['accuracy']['original']:.4f})")


if __name__ == '__main__':
    main()
