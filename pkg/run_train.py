import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import click

import settings
from checkpoint import save_checkpoint
from experiment import command_errors, common_options, configure_logging, load_config, open_dataset
from metrics import accuracy
from nn_models import ModelView, ResNetConfig, build_mini_resnet
from reports import write_rows, write_summary
from training import TrainConfig, train


@click.command(name="train")
@common_options("config", "dataset", "epochs", "lr", "batch_size", "seed", "out", "verbose")
@click.option("--single-logit", is_flag=True, default=None,
              help="One sigmoid logit instead of a softmax head (two-class datasets only).")
def main(config_path, verbose, single_logit, **flags):
    """Train a mini-ResNet on a shapes dataset; the checkpoint is written to --out."""
    configure_logging(verbose)
    cfg = load_config(config_path, require=("dataset",), **flags)
    dataset = open_dataset(cfg.dataset)
    with command_errors():
        classes = 1 if single_logit and dataset.classes == 2 else dataset.classes
        model = build_mini_resnet(ResNetConfig(image_size=dataset.images.shape[-1], classes=classes,
                                               in_channels=dataset.images.shape[1]), seed=cfg.seed)
        train_cfg = TrainConfig(lr=cfg.lr or settings.TRAIN_LR, batch_size=cfg.batch_size or settings.TRAIN_BATCH_SIZE,
                                epochs=cfg.epochs or settings.TRAIN_EPOCHS, seed=cfg.seed)
        click.echo(f"[1/3] Training for {train_cfg.epochs} epochs on {len(dataset)} images")
        model, log = train(model, dataset, train_cfg)
        click.echo(f"[2/3] Saving checkpoint to {cfg.out}")
        save_checkpoint(model, cfg.out)
        click.echo("[3/3] Evaluating train accuracy")
        train_accuracy = accuracy(ModelView(model), dataset.images, dataset.labels)
        write_rows(Path(cfg.out) / "rows.csv", log.epochs)
        write_summary(Path(cfg.out) / "summary.json", {
            "final_loss": log.final_loss,
            "train_accuracy": train_accuracy,
            "classes": model.classes,
        }, cfg.seed, cfg.to_dict())
    click.echo(f"Train accuracy {train_accuracy:.4f}, final loss {log.final_loss:.4f}")


if __name__ == '__main__':
    main()
