#!/usr/bin/env python3
"""Merge PASCAL-VOC style XML annotations into an existing manifest.

Starting point for running the pipeline on real data: first export
features with the extractor (which writes manifest.json, tensors and
descriptors), then run this script to attach ground-truth boxes and
class labels from an annotation directory:

    python3 scripts/voc_to_manifest.py STATE_DIR ANNOTATION_DIR

Each XML file must be named <image_id>.xml and follow the usual VOC
layout (<object><name>, <bndbox> with 1-based inclusive corners). Only
plain single-folder layouts are handled; image sets, difficult/truncated
filtering and COCO JSON are left to the caller.
"""

from __future__ import annotations

import json
import sys
import xml.etree.ElementTree as ET
from pathlib import Path


def boxes_from_voc_xml(path: Path) -> list[dict]:
    root = ET.parse(path).getroot()
    out = []
    for obj in root.iter("object"):
        name = obj.findtext("name", default="object")
        bnd = obj.find("bndbox")
        if bnd is None:
            continue
        # VOC corners are 1-based inclusive; manifests use 0-based half-open.
        xmin = int(float(bnd.findtext("xmin"))) - 1
        ymin = int(float(bnd.findtext("ymin"))) - 1
        xmax = int(float(bnd.findtext("xmax")))
        ymax = int(float(bnd.findtext("ymax")))
        out.append({"box": [xmin, ymin, xmax, ymax], "label": name})
    return out


def main(argv: list[str]) -> int:
    if len(argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    state_dir, annotation_dir = Path(argv[1]), Path(argv[2])
    manifest_path = state_dir / "manifest.json"
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    matched = 0
    for entry in doc["images"]:
        xml_path = annotation_dir / f"{entry['image_id']}.xml"
        if not xml_path.exists():
            continue
        boxes = boxes_from_voc_xml(xml_path)
        if not boxes:
            continue
        entry["ground_truth"] = boxes
        labels = {b["label"] for b in boxes}
        entry["class_label"] = sorted(labels)[0] if len(labels) == 1 else None
        matched += 1
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"annotated {matched}/{len(doc['images'])} images")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
