#    Copyright 2024 Alexander Koziell-Pipe

#    Licensed under the Apache License, Version 2.0 (the "License");
#    you may not use this file except in compliance with the License.
#    You may obtain a copy of the License at

#        http://www.apache.org/licenses/LICENSE-2.0

#    Unless required by applicable law or agreed to in writing, software
#    distributed under the License is distributed on an "AS IS" BASIS,
#    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#    See the License for the specific language governing permissions and
#    limitations under the License.
"""Out-of-distribution check on a FashionMNIST subset.

Trains the small MLP of ``configs/fashion_mnist_subset.json`` with context
points drawn half from the mini-batch and half from an auxiliary image
set, then scores how well predictive entropy separates the FashionMNIST
test images from a second, out-of-distribution image set. The CSV files
the configuration names are user supplied: flattened 28 x 28 images with
a header row, the class label as the last column of the labelled files::

    python scripts/fashion_mnist_ood.py --threads 4

Exits with status 1 when the AUROC does not exceed ``--threshold``.
"""
from __future__ import annotations
import argparse
import json
from pathlib import Path
import sys
from typing import Sequence

from fsvi import cli

DEFAULT_CONFIG = Path(__file__).parent.parent / 'configs' / (
    'fashion_mnist_subset.json'
)


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser of the harness."""
    parser = argparse.ArgumentParser(description=__doc__.split('\n')[0])
    parser.add_argument('--config', default=str(DEFAULT_CONFIG))
    parser.add_argument('--out', default='runs/fashion_mnist_subset')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--threshold', type=float, default=0.85)
    parser.add_argument('--threads', type=int, default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Train, evaluate and return the exit status."""
    args = build_parser().parse_args(argv)
    command = ['train', '--config', args.config, '--out', args.out,
               '--seed', str(args.seed)]
    if args.threads is not None:
        command += ['--threads', str(args.threads)]
    status = cli.main(command)
    if status != cli.EXIT_OK:
        return status
    metrics = json.loads((Path(args.out) / 'metrics.json').read_text())
    if 'auroc' not in metrics:
        print('error: the configuration names no evaluation.ood dataset',
              file=sys.stderr)
        return 1
    print(f'accuracy {metrics["accuracy"]:.4f}  ece {metrics["ece"]:.4f}  '
          f'ood auroc {metrics["auroc"]:.4f}')
    if not metrics['auroc'] > args.threshold:
        print(f'FAIL ood auroc {metrics["auroc"]:.4f} <= {args.threshold}',
              file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
