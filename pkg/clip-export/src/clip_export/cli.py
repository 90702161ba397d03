"""clip-export command line: manifest in, EMB1 files out.

Exit codes: 0 success, 1 bad input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import (
    DEFAULT_TEMPLATE,
    ExportJob,
    export_image_embeddings,
    export_text_embeddings,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"clip-export: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clip-export",
                description="Encode exported frames and class prompts "
                            "into EMB1 embedding files.")
    p.add_argument("--manifest", required=True,
                   help="JSONL frame manifest written next to the images")
    p.add_argument("--image-out", help="output EMB1 for frame embeddings")
    p.add_argument("--text-out", help="output EMB1 for class prompts")
    p.add_argument("--classes",
                   help="comma-separated class names, order preserved")
    p.add_argument("--classes-file",
                   help="file with one class name per line, order preserved")
    p.add_argument("--template", default=DEFAULT_TEMPLATE,
                   help="prompt template with one [CLASS] placeholder")
    p.add_argument("--checkpoint", default="hashproj-512",
                   help="encoder id: hashproj-<dim> or "
                        "open-clip:<arch>:<pretrained>")
    p.add_argument("--batch", type=int, default=32)
    return p


def _class_list(args) -> tuple[str, ...]:
    if args.classes and args.classes_file:
        raise ValueError("give --classes or --classes-file, not both")
    if args.classes:
        names = [c.strip() for c in args.classes.split(",")]
    elif args.classes_file:
        names = [line.strip()
                 for line in Path(args.classes_file).read_text().splitlines()
                 if line.strip()]
    else:
        return ()
    if not all(names):
        raise ValueError("empty class name")
    return tuple(names)


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    args = build_parser().parse_args(argv)
    try:
        if not args.image_out and not args.text_out:
            raise ValueError("nothing to do: give --image-out and/or --text-out")
        classes = _class_list(args)
        if args.text_out and not classes:
            raise ValueError("--text-out needs --classes or --classes-file")
        job = ExportJob(manifest=args.manifest,
                        image_out=args.image_out,
                        text_out=args.text_out,
                        classes=classes,
                        template=args.template,
                        checkpoint=args.checkpoint,
                        batch_size=args.batch)
        if args.image_out:
            n = export_image_embeddings(job)
            out.write(f"wrote {n} image rows to {args.image_out}\n")
        if args.text_out:
            k = export_text_embeddings(job)
            out.write(f"wrote {k} text rows to {args.text_out}\n")
        return 0
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"clip-export: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001, honest nonzero exit on bugs
        print(f"clip-export: failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
