"""Command-line front end: ascad-convert --in F.h5 --group profiling --out F.scat."""

from __future__ import annotations

import argparse
import os
import sys

from .convert import ConvertError, ConvertSpec, convert

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _parse_range(text: str) -> tuple[int, int]:
    try:
        start, count = (int(part) for part in text.split(","))
    except ValueError as exc:
        raise _UsageError(f"--range must be START,COUNT, got {text!r}") from exc
    return start, count


def build_parser() -> _Parser:
    parser = _Parser(prog="ascad-convert",
                     description="convert an ASCAD HDF5 capture to a SCAT container")
    parser.add_argument("--in", dest="input", required=True, help="input HDF5 file")
    parser.add_argument("--group", choices=("profiling", "attack"), default="profiling")
    parser.add_argument("--byte-index", type=int, default=2)
    parser.add_argument("--range", default=None, help="START,COUNT trace slice")
    parser.add_argument("--out", required=True, help="output SCAT file")
    parser.add_argument("--traces-path", default=None,
                        help="HDF5 dataset path override for the trace array")
    parser.add_argument("--metadata-path", default=None,
                        help="HDF5 dataset path override for the per-trace metadata")
    parser.add_argument("--labels-path", default=None,
                        help="HDF5 dataset path override for the stored labels")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        spec = ConvertSpec(input_path=args.input, output_path=args.out,
                           group=args.group, byte_index=args.byte_index,
                           trace_range=None if args.range is None else _parse_range(args.range),
                           traces_path=args.traces_path,
                           metadata_path=args.metadata_path,
                           labels_path=args.labels_path)
    except _UsageError as exc:
        print(f"ascad-convert: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"ascad-convert: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if not os.path.exists(spec.input_path):
        print(f"ascad-convert: data error: input not found: {spec.input_path}",
              file=sys.stderr)
        return EXIT_DATA
    try:
        count = convert(spec)
    except ConvertError as exc:
        print(f"ascad-convert: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"ascad-convert: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {count} traces to {spec.output_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
