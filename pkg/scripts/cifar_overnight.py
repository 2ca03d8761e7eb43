"""Overnight CIFAR-10 run: residual conv backbone, 30 epochs, Gaussian-noise OOD.

Expects the CIFAR-10 binary batches (data_batch_1.bin ... test_batch.bin)
in ``--cifar-dir``. Writes the checkpoint, history, class report and OOD
report under ``--out``. Use ``--limit-train`` for a quick smoke run.

    python scripts/cifar_overnight.py --cifar-dir ~/data/cifar-10-batches-bin --out runs/cifar
"""

import argparse
import json
from pathlib import Path

from zclassifier.cli import main as cli_main


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--cifar-dir", required=True)
    parser.add_argument("--out", default="runs/cifar")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--head", default="zclassifier", choices=["zclassifier", "nokl", "softmax"])
    parser.add_argument("--plain", action="store_true", help="vgg-style backbone without skip connections")
    parser.add_argument("--limit-train", type=int)
    parser.add_argument("--limit-test", type=int)
    args = parser.parse_args()

    config = json.loads((Path(__file__).resolve().parent.parent / "configs" / "cifar10.json").read_text())
    config["output_dir"] = args.out
    config["data"]["cifar_dir"] = args.cifar_dir
    config["train"]["epochs"] = args.epochs
    config["model"]["head"]["kind"] = args.head
    config["model"]["name"] = f"{'vgg' if args.plain else 'resnet'}-mini-{args.head}"
    config["model"]["residual"] = not args.plain
    for key in ("limit_train", "limit_test"):
        if getattr(args, key) is not None:
            config["data"][key] = getattr(args, key)

    Path(args.out).mkdir(parents=True, exist_ok=True)
    path = Path(args.out) / "config.json"
    path.write_text(json.dumps(config, indent=2))
    for cmd in ("train", "ood"):
        status = cli_main(["-v", cmd, str(path)])
        if status:
            raise SystemExit(status)


if __name__ == "__main__":
    main()
