"""Acceptance check for the exporter: its files must drive the engine.

The engine is exercised only through its command line and the documented
byte formats, the same way a user would wire the two tools together.
One criterion, one test, one PASS/FAIL line.
"""

import re
import subprocess
import sys

import numpy as np
import torch
from PIL import Image

from featexport.manifest import discover_images

from support import (
    exported_pair,
    read_feature_file_bytes,
    read_vocab_file_bytes,
    shared_source,
    shared_tree,
)

ENGINE = [sys.executable, "-m", "labelalign.cli"]
DIMS = ["--d-model", "64", "--d-feat", "32"]


def report(name: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'}: {name}: {detail}")
    return ok


def run_engine(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        ENGINE + list(args), capture_output=True, text=True
    )


def grab(pattern: str, text: str) -> float:
    match = re.search(pattern, text, re.MULTILINE)
    assert match, f"pattern {pattern!r} not found in:\n{text}"
    return float(match.group(1))


def recompute_reference_features() -> np.ndarray:
    """The float64 features the export should have stored, from scratch."""
    source = shared_source()
    _, entries = discover_images(shared_tree())
    images = []
    for _, _, path in entries:
        with Image.open(path) as img:
            images.append(img.convert("RGB"))
    batch = source.processor(images=images, return_tensors="pt")
    with torch.no_grad():
        out = source.model.get_image_features(pixel_values=batch["pixel_values"])
    feats = out.pooler_output if hasattr(out, "pooler_output") else out
    feats = feats.numpy().astype(np.float64)
    return feats / np.linalg.norm(feats, axis=1, keepdims=True)


def test_exported_features_drive_engine_end_to_end(tmp_path):
    features, vocab = exported_pair()

    # Engine validate must accept both files as-is.
    validated = run_engine("validate", features, vocab)
    validate_ok = validated.returncode == 0

    # Stored rows must match an independent recompute at 32-bit precision.
    _, _, names, records = read_feature_file_bytes(features)
    reference = recompute_reference_features()
    roundtrip_err = float(
        np.max(np.abs(records["feat"].astype(np.float64) - reference))
    )
    _, tokens, matrix = read_vocab_file_bytes(vocab)
    table = shared_source().model.text_model.embeddings.token_embedding.weight
    table = table.detach().numpy().astype(np.float64)
    vocab_err = 0.0
    for row, word in zip(matrix, tokens):
        ids = shared_source().tokenizer(word, add_special_tokens=False)["input_ids"]
        expected = table[ids].mean(axis=0)
        vocab_err = max(vocab_err, float(np.max(np.abs(row - expected))))
    roundtrip_ok = roundtrip_err <= 1e-6 and vocab_err <= 1e-6

    # A full run over the exported files: zero-shot baseline, then a
    # trained context evaluated on the same 36 features.
    zero = run_engine("zero-shot", "--features", features, "--vocab", vocab, *DIMS)
    zero_acc = grab(r"zero-shot accuracy: ([0-9.]+)", zero.stdout)

    checkpoint = str(tmp_path / "real.ckpt")
    trained = run_engine(
        "train", "--features", features, "--vocab", vocab, *DIMS,
        "--shots", "4", "--seed", "1", "--epochs", "50",
        "--out", checkpoint,
    )
    heldout_acc = grab(r"test accuracy: ([0-9.]+)", trained.stdout)

    evaluated = run_engine(
        "eval", "--features", features, "--vocab", vocab, *DIMS,
        "--checkpoint", checkpoint,
    )
    eval_acc = grab(r"accuracy: ([0-9.]+)", evaluated.stdout)
    run_ok = (
        zero.returncode == 0
        and trained.returncode == 0
        and evaluated.returncode == 0
        and eval_acc >= zero_acc
    )

    ok = report(
        "exporter end-to-end",
        validate_ok and roundtrip_ok and run_ok,
        f"validate exit {validated.returncode}, 32-bit round-trip max err "
        f"{max(roundtrip_err, vocab_err):.1e}, zero-shot {zero_acc:.4f} -> "
        f"trained eval {eval_acc:.4f} on the same {len(records)} features "
        f"(held-out test {heldout_acc:.4f}, {len(names)} classes, "
        f"{len(tokens)} vocab words)",
    )
    assert ok
