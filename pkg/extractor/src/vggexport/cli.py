"""Command line entry: export VGG activations into a pipeline state directory."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .extract import DEFAULT_LAYERS, ExtractionError, ExtractionSpec, MissingWeights, extract


@click.group()
def cli() -> None:
    """Pretrained-CNN feature export."""


@cli.command("extract")
@click.option("--network", default="vgg16", show_default=True, type=click.Choice(["vgg16", "vgg19"]))
@click.option("--images", "images_dir", required=True, help="Directory of input images.")
@click.option("--out", "out_dir", required=True, help="Output state directory.")
@click.option("--layers", multiple=True,
              help="Layer tags to export; defaults to the two pre-pooling ReLUs of the network.")
@click.option("--weights", default="pretrained", show_default=True,
              help="'pretrained' (model zoo), 'none' (random init), or a state-dict path.")
@click.option("--long-side", default=1024, show_default=True,
              help="Cap on the longer image side for the convolutional pass.")
def extract_cmd(network, images_dir, out_dir, layers, weights, long_side) -> None:
    """Write per-image tensors, fc6 descriptors and a manifest."""
    spec = ExtractionSpec(
        network=network,
        images_dir=Path(images_dir),
        out_dir=Path(out_dir),
        layers=list(layers) or list(DEFAULT_LAYERS[network]),
        weights=weights,
        long_side=long_side,
    )
    manifest = extract(spec)
    click.echo(f"wrote {len(manifest['images'])} image(s) to {out_dir}")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 2
    except MissingWeights as exc:
        click.echo(f"fatal: {exc}", err=True)
        return 1
    except ExtractionError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
