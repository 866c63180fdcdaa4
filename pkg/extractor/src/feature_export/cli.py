"""CLI: ``bnc-extract extract --root DIR --domain NAME --out FILE.bncf`` and
``bnc-extract verify FILE.bncf``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import FeatureExportError
from .extract import ExtractionJob, extract, verify


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnc-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract a domain/class/image tree into a BNCF file")
    p.add_argument("--root", required=True, help="directory of class subdirectories")
    p.add_argument("--domain", required=True, help="domain name stored in the file (max 16 bytes)")
    p.add_argument("--out", required=True, help="BNCF output path")
    p.add_argument("--class-map", default=None, metavar="JSON",
                   help="JSON file mapping class name to index (default: sorted directory names)")
    p.add_argument("--batch-size", type=int, default=32, help="inference batch size (default: %(default)s)")
    p.add_argument("--device", default="cpu", help="torch device (default: %(default)s)")
    p.add_argument("--weights", default="pretrained",
                   help="'pretrained', 'random', or a path to a resnet50 state dict (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="seed for --weights random (default: %(default)s)")

    p = sub.add_parser("verify", help="validate a BNCF file and print a summary")
    p.add_argument("path", help="BNCF file to check")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            class_map = None
            if args.class_map:
                class_map = json.loads(Path(args.class_map).read_text())
            job = ExtractionJob(
                input_root=args.root,
                domain=args.domain,
                output_path=args.out,
                class_map=class_map,
                batch_size=args.batch_size,
                device=args.device,
                weights=args.weights,
                seed=args.seed,
            )
            report = extract(job)
            print(f"wrote {args.out}")
            print(report.summary())
        else:
            report = verify(args.path)
            print(f"{args.path}: OK")
            print(report.summary())
        return 0
    except FeatureExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
