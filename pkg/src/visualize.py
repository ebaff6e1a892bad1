import logging

import cv2
import numpy as np
import pandas as pd

from utilities import write_atomic

logger = logging.getLogger(__name__)

UPPER_COLOR = (0, 200, 255)
LOWER_COLOR = (255, 160, 0)
LINE_COLOR = {"med": (0, 255, 0), "lat": (255, 0, 255)}
POINT_COLOR = (0, 0, 255)
TEXT_COLOR = (255, 255, 255)
FONT = cv2.FONT_HERSHEY_SIMPLEX


def _contours(mask, origin):
    contours, _ = cv2.findContours(mask.astype(np.uint8), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    return [c + np.array(origin, dtype=c.dtype) for c in contours]


def render_overlay(img, report):
    """ Draws what each graded knee was assessed on.

    Parameters
    ----------
    img : <class 'NormalizedImage'>
        the study the report was computed on
    report : <class 'StudyReport'>
        grading result holding the masks and measurements of each knee

    Returns
    -------
    The BGR overlay as a uint8 array and the list of drawn annotations. Mask
    contours, the two lowest points, one line per averaged gap column and a
    caption with D_avg in mm, the JSN grades and the KL grade are drawn; the
    measurement lines come from the report's own JsdMeasurement objects
    """

    gray = np.rint(np.asarray(img.pixels) * 255.0).astype(np.uint8)
    canvas = cv2.cvtColor(gray, cv2.COLOR_GRAY2BGR)
    annotations = []
    for knee in report.knees:
        if knee.masks is None or knee.roi is None:
            continue
        origin = knee.roi.origin
        for bone, mask, color in (("upper", knee.masks.upper, UPPER_COLOR), ("lower", knee.masks.lower, LOWER_COLOR)):
            cv2.drawContours(canvas, _contours(mask, origin), -1, color, 1)
            annotations.append({"kind": "contour", "knee_side": knee.knee_side, "bone": bone})

        measurement = knee.measurement
        if measurement is None:
            continue
        for compartment, point in (("med", measurement.lowest_med), ("lat", measurement.lowest_lat)):
            center = (int(point[0] + origin[0]), int(point[1] + origin[1]))
            cv2.circle(canvas, center, 4, POINT_COLOR, -1)
            annotations.append({"kind": "lowest_point", "knee_side": knee.knee_side,
                                "compartment": compartment, "at": list(center)})
        for compartment, lines in (("med", measurement.lines_med), ("lat", measurement.lines_lat)):
            for line in lines:
                x = line.column + origin[0]
                start, stop = (x, line.upper_row + origin[1]), (x, line.lower_row + origin[1])
                cv2.line(canvas, start, stop, LINE_COLOR[compartment], 1)
                annotations.append({"kind": "line", "knee_side": knee.knee_side, "compartment": compartment,
                                    "column": int(x), "length_px": line.length_px})

        caption = [f"MED {measurement.med_mm:.2f} mm  LAT {measurement.lat_mm:.2f} mm"]
        if knee.jsn is not None:
            caption.append(f"JSN med {knee.jsn.med} lat {knee.jsn.lat}")
        if knee.assessment is not None:
            caption.append(f"KL {knee.assessment.kl_grade}")
        x0 = max(int(knee.detection.box[0]), 0)
        y0 = max(int(knee.detection.box[1]), 0)
        for row, text in enumerate(caption):
            cv2.putText(canvas, text, (x0 + 5, y0 + 20 + 22 * row), FONT, 0.6, TEXT_COLOR, 1, cv2.LINE_AA)
            annotations.append({"kind": "text", "knee_side": knee.knee_side, "text": text})
    return canvas, annotations


def line_counts(annotations):
    """ Number of drawn measurement lines per (knee_side, compartment). """

    counts = {}
    for item in annotations:
        if item["kind"] == "line":
            key = (item["knee_side"], item["compartment"])
            counts[key] = counts.get(key, 0) + 1
    return counts


def save_overlay(path, canvas):
    ok, encoded = cv2.imencode(".png", canvas)
    if not ok:
        raise OSError(f"cannot encode overlay for {path}")
    write_atomic(path, encoded.tobytes())


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    return plt


def plot_confusion(cm, path, title="Confusion matrix"):
    """ Saves a confusion matrix heat map with the counts written in each cell. """

    plt = _pyplot()
    frame = pd.DataFrame(cm.counts, index=range(cm.n_classes), columns=range(cm.n_classes))
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(frame.values, cmap="Blues")
    for (t, p), value in np.ndenumerate(frame.values):
        ax.text(p, t, str(value), ha="center", va="center")
    ax.set_xlabel("Predicted grade")
    ax.set_ylabel("True grade")
    ax.set_xticks(range(cm.n_classes))
    ax.set_yticks(range(cm.n_classes))
    ax.set_title(title)
    fig.colorbar(image, ax=ax)
    fig.savefig(path)
    plt.close(fig)


def plot_agreement(table, path):
    """ Saves the pairwise QWK heat map next to the 1 / QWK distance rendering (unconnected pairs shown as '-'). """

    plt = _pyplot()
    size = len(table.rater_ids)
    distance = np.array([[np.nan if d is None else d for d in row] for row in table.distances()])
    fig, ax = plt.subplots(1, 2, figsize=(11, 5))
    panels = ((ax[0], table.kappa, "QWK", "viridis"), (ax[1], distance, "Distance (1 / QWK)", "magma_r"))
    for axis, grid, title, cmap in panels:
        image = axis.imshow(np.ma.masked_invalid(grid), cmap=cmap)
        axis.set_xticks(range(size))
        axis.set_yticks(range(size))
        axis.set_xticklabels(table.rater_ids, rotation=45, ha="right")
        axis.set_yticklabels(table.rater_ids)
        axis.set_title(title)
        for (i, j), value in np.ndenumerate(grid):
            axis.text(j, i, "-" if np.isnan(value) else f"{value:.3f}", ha="center", va="center", color="w")
        fig.colorbar(image, ax=axis, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
