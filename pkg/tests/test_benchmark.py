from __future__ import annotations

import numpy as np

from physeg.benchmark import (
    AMBIGUOUS_PAIR,
    build_demo,
    demo_graph,
    demo_labels,
    format_table,
    load_manifest,
)


def test_demo_graph_shape():
    graph = demo_graph()
    assert graph.num_classes == 4
    a, b = AMBIGUOUS_PAIR
    # the ambiguous pair is SAR-separable: disjoint intervals
    sar_a, sar_b = graph.interval(a, "SAR"), graph.interval(b, "SAR")
    assert sar_a.lo > sar_b.hi or sar_b.lo > sar_a.hi
    # and visually confusable: identical NDVI/DEM priors
    assert graph.interval(a, "NDVI") == graph.interval(b, "NDVI")
    assert graph.interval(a, "DEM") == graph.interval(b, "DEM")


def test_demo_labels_cover_all_classes():
    for k in range(3):
        labels = demo_labels(k)
        assert labels.shape == (32, 32)
        assert sorted(np.unique(labels).tolist()) == [1, 2, 3, 4]


def test_manifest_round_trip(tmp_path):
    build_demo(str(tmp_path), seed=4, num_scenes=2, size=16)
    graph, scenes, manifest = load_manifest(str(tmp_path))
    assert graph.num_classes == 4
    assert len(scenes) == 2
    for scene in scenes:
        assert scene.labels.shape == (16, 16)
        assert scene.coarse.shape == (16, 16, 4)
        assert set(scene.rasters) == {"NDVI", "DEM", "SAR"}
    assert manifest["seed"] == 4


def test_format_table_mentions_rows():
    table = {
        "rows": [
            {
                "name": "baseline",
                "use_synth_data": False,
                "use_pckg_reweight": False,
                "use_phys_loss": False,
                "miou": 0.5,
                "delta": 0.0,
            }
        ],
        "ordering_ok": True,
    }
    text = format_table(table)
    assert "baseline" in text and "0.5000" in text
