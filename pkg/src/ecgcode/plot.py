"""SVG rendering of leads with shaded P/QRS/T segments."""

from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .signal_io import AnnotationSet, EcgRecord

CLASS_COLORS = {"P": "#4c9be8", "QRS": "#e8574c", "T": "#3fb56b"}
SVG_NS = "http://www.w3.org/2000/svg"


def render_svg(record: EcgRecord, annotations: AnnotationSet | None = None, width: int = 1200,
               lead_height: int = 80, max_points: int = 2500, leads: int | None = None) -> str:
    """One polyline per lead; one shaded ``rect.segment`` per annotated segment.

    Segment sample indices are read at the record's sampling rate.
    """
    n_leads = record.n_leads if leads is None else max(1, min(leads, record.n_leads))
    margin = 40
    height = n_leads * lead_height + 2 * margin
    plot_w = width - 2 * margin
    n = record.n_samples

    def x_of(sample: float) -> float:
        return margin + plot_w * sample / max(n - 1, 1)

    ET.register_namespace("", SVG_NS)
    svg = ET.Element("svg", {"xmlns": SVG_NS, "width": str(width), "height": str(height),
                             "viewBox": f"0 0 {width} {height}"})
    ET.SubElement(svg, "title").text = f"{record.id} ({record.sampling_rate_hz} Hz)"
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(width), "height": str(height), "fill": "white"})

    regions = ET.SubElement(svg, "g", {"id": "segments"})
    for seg in (annotations.segments if annotations else ()):
        cls = seg.wave_class.value
        x0, x1 = x_of(seg.onset), x_of(min(seg.offset, n - 1))
        ET.SubElement(regions, "rect", {
            "class": f"segment {cls}",
            "data-class": cls,
            "data-onset": str(seg.onset),
            "data-offset": str(seg.offset),
            "x": f"{x0:.2f}", "y": str(margin), "width": f"{max(x1 - x0, 0.5):.2f}",
            "height": str(n_leads * lead_height),
            "fill": CLASS_COLORS[cls], "fill-opacity": "0.25",
        })

    traces = ET.SubElement(svg, "g", {"id": "leads", "fill": "none", "stroke": "black", "stroke-width": "0.8"})
    step = max(1, n // max_points)
    idx = np.arange(0, n, step)
    for row in range(n_leads):
        x = record.samples[row, idx].astype(np.float64)
        span = float(np.ptp(x)) or 1.0
        mid = margin + (row + 0.5) * lead_height
        ys = mid - (x - float(np.median(x))) / span * 0.9 * lead_height
        points = " ".join(f"{x_of(i):.1f},{y:.1f}" for i, y in zip(idx, ys))
        ET.SubElement(traces, "polyline", {"class": "lead", "data-lead": record.leads[row], "points": points})
        label = ET.SubElement(svg, "text", {"x": "4", "y": f"{mid:.1f}", "font-size": "11"})
        label.text = record.leads[row]
    return ET.tostring(svg, encoding="unicode")


def write_svg(record: EcgRecord, annotations: AnnotationSet | None, path: str | os.PathLike, **kwargs) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(record, annotations, **kwargs))
