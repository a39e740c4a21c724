import json
from pathlib import Path

import numpy as np
import pytest

from divergen.dataset import (
    CategoryRecord,
    DatasetBundle,
    ImageRecord,
    ImageSource,
    InstanceAnnotation,
)
from divergen.masks import BitMask, bbox_from_mask, rle_encode


def make_annotation(ann_id: int, image_id: int, category_id: int, bits: np.ndarray,
                    provenance="annotated") -> InstanceAnnotation:
    from divergen.dataset import Provenance

    mask = BitMask.from_array(bits)
    return InstanceAnnotation(
        id=ann_id, image_id=image_id, category_id=category_id,
        mask=rle_encode(mask), bbox=bbox_from_mask(mask), area=mask.popcount(),
        provenance=Provenance(provenance),
    )


def disk_bits(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


@pytest.fixture
def minimal_bundle() -> DatasetBundle:
    return DatasetBundle(
        categories=(CategoryRecord(id=1, name="banana"),),
        images=(ImageRecord(id=1, width=8, height=8, uri="images/1.png",
                            source=ImageSource.REAL),),
    )


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    reports = []
    for key in ("passed", "failed"):
        reports.extend(r for r in terminalreporter.stats.get(key, [])
                       if r.when == "call" and "test_acceptance" in r.nodeid)
    if not reports:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for report in sorted(reports, key=lambda r: r.nodeid):
        status = "PASS" if report.passed else "FAIL"
        terminalreporter.write_line(f"{status}: {report.nodeid.split('::')[-1]}")
