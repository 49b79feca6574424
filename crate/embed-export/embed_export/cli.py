import argparse
import logging
import sys
from pathlib import Path

from .backends import VISUAL_MODES
from .errors import ExportError
from .export import ExportJob, export_embeddings


def build_parser():
    p = argparse.ArgumentParser(prog="embed-export")
    sub = p.add_subparsers(dest="command", required=True)
    e = sub.add_parser("export", help="write image and text features for the precomputed backend")
    e.add_argument("--images", type=Path, required=True)
    e.add_argument("--categories", type=Path, required=True)
    e.add_argument("--model", required=True, help="CLIP checkpoint id, or toy[:d=..,patch=..,seed=..]")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--visual", choices=VISUAL_MODES, default="hidden",
                   help="last hidden-state tokens, or tokens mapped through the joint projection")
    e.add_argument("--allow-download", action="store_true")
    e.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    job = ExportJob(images=args.images, categories=args.categories, model=args.model, out=args.out,
                    visual=args.visual, allow_download=args.allow_download)
    try:
        manifest = export_embeddings(job)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
