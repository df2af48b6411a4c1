"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable inputs,
bad model directory).
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ExportDataError, ExportUsageError
from .export import export_features, export_vocab, load_source
from .manifest import ExportManifest


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ExportUsageError(message)


def _read_words(args) -> list[str]:
    if args.words is not None:
        return [w for w in args.words.split(",") if w.strip()]
    with open(args.words_file) as fh:
        return [line.strip() for line in fh if line.strip()]


def _cmd_export_features(args) -> None:
    manifest = ExportManifest(
        model_path=args.model,
        image_root=args.images,
        out_features=args.out,
    )
    summary = export_features(manifest, batch_size=args.batch_size)
    print(f"features: {args.out} ({summary['items']} items, "
          f"{summary['categories']} categories, d_feat {summary['d_feat']})")
    if summary["skipped"]:
        print(f"skipped {summary['skipped']} unreadable image(s)", file=sys.stderr)
    if args.log:
        with open(args.log, "w") as fh:
            json.dump({"log": manifest.log}, fh, indent=2)
            fh.write("\n")
        print(f"log: {args.log}")


def _cmd_export_vocab(args) -> None:
    manifest = ExportManifest(
        model_path=args.model,
        words=_read_words(args),
        out_vocab=args.out,
    )
    summary = export_vocab(manifest)
    print(f"vocab: {args.out} ({summary['vocab_size']} words, "
          f"d_model {summary['d_model']})")


def _cmd_model_info(args) -> None:
    source = load_source(args.model)
    print(f"d_feat (projection): {source.d_feat}")
    print(f"d_model (text embedding): {source.d_model}")
    print(f"tokenizer vocab: {len(source.tokenizer)} tokens")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="featexport",
        description="Export dual-encoder image features and word embeddings "
                    "into labelalign interchange files.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("export-features",
                       help="encode an image folder tree into a FeatureFile")
    p.add_argument("--model", required=True, help="source model directory")
    p.add_argument("--images", required=True,
                   help="folder with one subfolder per class")
    p.add_argument("--out", required=True, help="FeatureFile output path")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--log", default=None,
                   help="optional JSON file for the manifest log")
    p.set_defaults(func=_cmd_export_features)

    p = sub.add_parser("export-vocab",
                       help="embed a word list into a VocabFile")
    p.add_argument("--model", required=True, help="source model directory")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--words", default=None, help="comma-separated word list")
    g.add_argument("--words-file", default=None, help="one word per line")
    p.add_argument("--out", required=True, help="VocabFile output path")
    p.set_defaults(func=_cmd_export_vocab)

    p = sub.add_parser("model-info", help="print source model dimensions")
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_model_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except ExportUsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ExportDataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
