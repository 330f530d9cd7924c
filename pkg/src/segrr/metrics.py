"""Segmentation evaluation metrics: Dice, PPV, Sensitivity, HD95, ASSD.

Surface distances are exact Euclidean (distance transform over the
grid), pooled symmetrically over both directed distance sets. Both-empty
masks give Dice 1 with a flag; empty surfaces make the distance metrics
undefined rather than raising.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def _as_binary(mask):
    m = np.asarray(mask)
    if m.dtype != bool:
        m = m.astype(bool)
    return m


def _check_shapes(pred, ref):
    if pred.shape != ref.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {ref.shape}")


def dice(pred, ref):
    """2|A.B| / (|A|+|B|); both-empty is defined as 1 (vacuous agreement)."""
    pred, ref = _as_binary(pred), _as_binary(ref)
    _check_shapes(pred, ref)
    a, b = int(pred.sum()), int(ref.sum())
    if a + b == 0:
        return 1.0
    return 2.0 * int((pred & ref).sum()) / (a + b)


def ppv_sensitivity(pred, ref):
    """(PPV, Sensitivity); entries are None when their denominator is empty."""
    pred, ref = _as_binary(pred), _as_binary(ref)
    _check_shapes(pred, ref)
    tp = int((pred & ref).sum())
    fp = int((pred & ~ref).sum())
    fn = int((~pred & ref).sum())
    ppv = tp / (tp + fp) if tp + fp else None
    sens = tp / (tp + fn) if tp + fn else None
    return ppv, sens


def surface_extract(mask):
    """Foreground pixels with at least one background 4-neighbor.

    Out-of-bounds counts as background. Returns an (n, 2) int array of
    (row, col) coordinates.
    """
    mask = _as_binary(mask)
    if not mask.any():
        return np.zeros((0, 2), dtype=np.intp)
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    surface = mask & ~interior
    return np.argwhere(surface)


def _directed_distances(src_mask, dst_mask, spacing):
    """Distance from every surface pixel of src to the surface of dst."""
    dst_surface = np.zeros(dst_mask.shape, dtype=bool)
    pts = surface_extract(dst_mask)
    dst_surface[pts[:, 0], pts[:, 1]] = True
    dist = ndimage.distance_transform_edt(~dst_surface)
    src_pts = surface_extract(src_mask)
    return dist[src_pts[:, 0], src_pts[:, 1]] * spacing


def _pooled_surface_distances(pred, ref, spacing):
    pred, ref = _as_binary(pred), _as_binary(ref)
    _check_shapes(pred, ref)
    if not pred.any() or not ref.any():
        return None
    return np.concatenate([_directed_distances(pred, ref, spacing),
                           _directed_distances(ref, pred, spacing)])


def hd95(pred, ref, spacing=1.0):
    """95th percentile (linear interpolation) of pooled surface distances.

    None when either surface is empty.
    """
    d = _pooled_surface_distances(pred, ref, spacing)
    if d is None:
        return None
    return float(np.percentile(d, 95, method="linear"))


def assd(pred, ref, spacing=1.0):
    """Mean of pooled directed surface distances; None when undefined."""
    d = _pooled_surface_distances(pred, ref, spacing)
    if d is None:
        return None
    return float(d.mean())


@dataclass
class MetricsReport:
    """Per-class metrics plus aggregates over the defined entries.

    Each per-class list holds one value per foreground class; None marks
    an undefined entry (empty denominator or empty surface).
    """

    class_ids: list = field(default_factory=list)
    dc: list = field(default_factory=list)
    ppv: list = field(default_factory=list)
    sensitivity: list = field(default_factory=list)
    hd95: list = field(default_factory=list)
    assd: list = field(default_factory=list)

    @staticmethod
    def _agg(values):
        defined = [v for v in values if v is not None]
        return float(np.mean(defined)) if defined else None

    def aggregates(self):
        return {
            "dc": self._agg(self.dc),
            "ppv": self._agg(self.ppv),
            "sensitivity": self._agg(self.sensitivity),
            "hd95": self._agg(self.hd95),
            "assd": self._agg(self.assd),
        }


def evaluate_labels(pred_labels, ref_labels, num_classes, spacing=1.0):
    """Mean per-foreground-class metrics over a list of label maps.

    pred_labels/ref_labels: sequences of integer label grids. Per-class
    values are averaged over the samples where they are defined.
    """
    if len(pred_labels) != len(ref_labels):
        raise ValueError("prediction and reference counts differ")
    report = MetricsReport()
    for cls in range(1, num_classes):
        dcs, ppvs, senss, hds, assds = [], [], [], [], []
        for p, r in zip(pred_labels, ref_labels):
            pm, rm = (np.asarray(p) == cls), (np.asarray(r) == cls)
            dcs.append(dice(pm, rm))
            pv, sn = ppv_sensitivity(pm, rm)
            ppvs.append(pv)
            senss.append(sn)
            hds.append(hd95(pm, rm, spacing))
            assds.append(assd(pm, rm, spacing))
        report.class_ids.append(cls)
        report.dc.append(MetricsReport._agg(dcs))
        report.ppv.append(MetricsReport._agg(ppvs))
        report.sensitivity.append(MetricsReport._agg(senss))
        report.hd95.append(MetricsReport._agg(hds))
        report.assd.append(MetricsReport._agg(assds))
    return report
