"""Shared fixture: a tiny frame export produced by the primary package.

The exporter only ever sees the manifest and the PNG files, the same
boundary a real deployment has; the primary package appears again in
assertions as the consumer the output files must satisfy.
"""

import json

import pytest
from evrec.datasets import export_frames, scan_dataset, write_dataset
from evrec.events import SyntheticDatasetSpec, gen_synthetic
from evrec.frames import WindowingConfig

DUP_ID = "dupe_00000"


@pytest.fixture(scope="session")
def frames_root(tmp_path_factory):
    data = tmp_path_factory.mktemp("data")
    streams = gen_synthetic(SyntheticDatasetSpec(
        2, 2, width=48, height=48, events_per_sample=400,
        noise_fraction=0.2, seed=3))
    write_dataset(streams, data, "test")
    _, items = scan_dataset(data, "test")
    out = tmp_path_factory.mktemp("frames")
    manifest = export_frames(items, out, WindowingConfig(100))

    # Duplicate the first sample's images under a new id so tests can pin
    # identical-input determinism through the whole export path.
    rows = [json.loads(line) for line in manifest.splitlines()]
    src = out / "test" / rows[0]["class"] / rows[0]["id"]
    dst = out / "test" / rows[0]["class"] / DUP_ID
    dst.mkdir(parents=True)
    for path in src.iterdir():
        (dst / path.name).write_bytes(path.read_bytes())
    dup_row = json.dumps(dict(rows[0], id=DUP_ID), sort_keys=True)
    (out / "manifest-test.jsonl").write_text(manifest + dup_row + "\n")
    return out
