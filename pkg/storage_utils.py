"""
Run-folder storage for campaigns
- one folder per run, one sub-folder per (algorithm, sweep value, seed) cell
- CSV artifacts with a versioned header comment (schema, config hash, seed)
- versioned checkpoints of learner parameters and optimizer state
"""
import io
import os
import time
import uuid
from pathlib import Path

import pandas as pd
import torch

from config import OUTPUT_ROOT, VERBOSE, checkpoint_hash, config_hash

CSV_SCHEMAS = {
    "metrics": 1,
    "curve": 1,
    "trace": 1,
    "summary": 1,
    "failures": 1,
    "timings": 1,
}
CHECKPOINT_VERSION = 2


def _say(message):
    if VERBOSE:
        print(message)


def write_csv(frame, path, kind, meta=None):
    """Write a DataFrame with '# key=value' header lines ahead of the column row"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema": f"{kind}/v{CSV_SCHEMAS[kind]}"}
    header.update(meta or {})
    buffer = io.StringIO()
    for key, value in header.items():
        buffer.write(f"# {key}={value}\n")
    frame.to_csv(buffer, index=False, lineterminator="\n", float_format="%.10g")
    path.write_text(buffer.getvalue())
    return str(path)


def read_csv_meta(path):
    """Header metadata of a CSV written by write_csv"""
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
    return meta


def read_csv(path):
    return pd.read_csv(path, comment="#")


class RunStorage:
    """Manages the folder tree of one campaign run"""

    def __init__(self, output_root=None, run_name=None):
        self.output_root = Path(output_root or OUTPUT_ROOT)

        # Unique folder per run unless the caller pins a name
        if run_name is None:
            run_name = f"{int(time.time())}_{uuid.uuid4().hex[:8]}"
        self.run_name = run_name
        self.run_folder = self.output_root / run_name
        self.cells_folder = self.run_folder / "cells"
        self.cells_folder.mkdir(parents=True, exist_ok=True)
        self.cell_folder = None

        _say(f"\n{'=' * 70}")
        _say(f"📁 RUN FOLDER: {self.run_folder}")
        _say(f"{'=' * 70}\n")

    def enter_cell(self, algorithm, axis, value, seed):
        """Select (and create) the deterministic folder of one campaign cell"""
        name = f"{algorithm}__{axis}={value}__seed={seed}" if axis else f"{algorithm}__seed={seed}"
        self.cell_folder = self.cells_folder / name
        self.cell_folder.mkdir(parents=True, exist_ok=True)
        return self.cell_folder

    def cell_path(self, filename):
        if self.cell_folder is None:
            raise RuntimeError("No campaign cell selected; call enter_cell() first")
        return self.cell_folder / filename

    def run_path(self, filename):
        return self.run_folder / filename

    def save_checkpoint(self, learner, tag="final", meta=None):
        """Versioned container of parameters, optimizer state, counters, rng cursor and config hashes"""
        path = self.cell_path(f"checkpoint_{tag}.pt")
        payload = {
            "version": CHECKPOINT_VERSION,
            "config_hash": config_hash(learner.cfg, learner.hyper),
            "checkpoint_hash": checkpoint_hash(learner.cfg, learner.hyper),
            "seed": learner.seed,
            "learner": learner.state_dict(),
            "rng": learner.rng_state,
        }
        payload.update(meta or {})
        torch.save(payload, path)
        _say(f"💾 Checkpoint saved: {path}")
        return str(path)


def load_checkpoint(path, learner):
    """
    Restore a learner in place; refuses checkpoints of another configuration.
    Training length may differ: a checkpoint trained for K episodes loads under any EP.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {payload.get('version')} in {path}")
    expected = checkpoint_hash(learner.cfg, learner.hyper)
    if payload["checkpoint_hash"] != expected:
        raise ValueError(f"Checkpoint config {payload['checkpoint_hash']} does not match {expected}")
    learner.load_state_dict(payload["learner"])
    learner.rng_state = payload.get("rng")
    _say(f"📥 Checkpoint loaded: {os.path.basename(str(path))}")
    return payload
