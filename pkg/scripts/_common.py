"""Shared bits for the experiment scripts: checkpoint loading and table output."""

import argparse
import csv
import sys
from pathlib import Path

from datta import ModelSpec, SourceTask, TrainConfig, train_source
from datta.datagen import Domain
from datta.harness import load_checkpoint, save_checkpoint

MIX4 = [Domain(k, 5) for k in ("gaussian_noise", "shot_noise", "impulse_noise", "contrast")]


def parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--ckpt", help="source checkpoint; trained with defaults (and cached here) if missing")
    p.add_argument("--seeds", type=int, default=5, help="stream seeds 0..N-1")
    p.add_argument("--batches", type=int, default=40)
    p.add_argument("--out", help="CSV path for the result table (default: stdout only)")
    return p


def checkpoint(path):
    if path and Path(path).exists():
        return load_checkpoint(path)
    ckpt = train_source(SourceTask(), ModelSpec(), TrainConfig())
    if path:
        save_checkpoint(ckpt, path)
    return ckpt


def emit(header, rows, out=None):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if out:
        with open(out, "w", newline="") as fh:
            fw = csv.writer(fh, lineterminator="\n")
            fw.writerow(header)
            fw.writerows(rows)
