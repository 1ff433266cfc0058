"""Command-line front end for the extraction adapter.

Exit codes: 0 when every manifest row was written, 1 when any row failed
(the partial file is still written) or an input is unusable, 2 for usage
errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from trifuse.model import ModelDims

from .adapter import ExtractionSpec, build_dataset
from .encoders import BACKENDS, load_backend

__all__ = ["main", "build_parser"]


def _parse_dims(text: str) -> ModelDims:
    parts = text.split(",")
    if len(parts) != 6:
        raise ValueError(f"dims must be six comma-separated integers, got {text!r}")
    values = [int(p) for p in parts]
    if any(v < 1 for v in values):
        raise ValueError(f"dims must be positive, got {text!r}")
    return ModelDims(*values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trifuse-extract",
        description="Extract tri-channel feature files from an id,text,image_path,label manifest.",
    )
    parser.add_argument("--manifest", required=True, help="input CSV manifest")
    parser.add_argument("--out", required=True, help="output feature file")
    parser.add_argument("--dims", default="4,16,4,16,4,16", help="L_t,d_t,L_i,d_i,L_m,d_m")
    parser.add_argument("--backend", choices=BACKENDS, default="hashed")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        spec = ExtractionSpec(
            manifest_path=args.manifest,
            out_path=args.out,
            dims=_parse_dims(args.dims),
            backend=load_backend(args.backend),
        )
        report = build_dataset(spec)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for err in report.errors:
        print(f"row {err.row_index} (id {err.record_id}): {err.message}", file=sys.stderr)
    print(
        f"wrote {report.written} of {report.requested} records to {report.out_path} "
        f"({len(report.errors)} errors)"
    )
    return 1 if report.errors else 0


if __name__ == "__main__":
    sys.exit(main())
