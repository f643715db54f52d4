"""Video-quality proxies, paired-oracle metrics and run reports.

The four proxies score a clip in [0, 1], higher being better:

* ``temporal_flickering``: one minus the mean frame-to-frame change on
  low-motion pixels (below the clip's 90th percentile of change).
* ``motion_smoothness``: one minus the normalized second temporal difference.
* ``background_consistency``: similarity of block-pooled background features
  of every frame to the first frame.
* ``subject_consistency``: similarity of random-projection features of the
  arm crop between adjacent frames.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import binary_dilation

from .compositing import difference_mask
from .datagen import list_clips, read_clip
from .errors import InvalidArgument, MissingData, UndefinedRegion
from .gan.crops import crop_box
from .video import MaskSequence, VideoTensor, load_frames

log = logging.getLogger(__name__)

METRICS_VERSION = "armswap-proxies-2"
PROXIES = ("motion_smoothness", "background_consistency", "subject_consistency",
           "temporal_flickering")
SMOOTH_EPS = 1e-6
DILATE = 4
POOL = 8
SUBJECT_SIZE = 32
SUBJECT_DIM = 256
PSNR_CAP = 99.0


def _frames(video) -> np.ndarray:
    data = video.data if isinstance(video, VideoTensor) else np.asarray(video)
    return data.astype(np.float64)


def _masks(masks) -> np.ndarray:
    return (masks.data if isinstance(masks, MaskSequence) else np.asarray(masks)) > 0


def _cos01(a, b) -> float:
    """Cosine similarity mapped from [-1, 1] to [0, 1]; identical vectors give exactly 1."""
    if np.array_equal(a, b):
        return 1.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.5
    c = float(np.dot(a, b) / (na * nb))
    return (min(1.0, max(-1.0, c)) + 1.0) / 2.0


def temporal_flickering(video) -> float:
    x = _frames(video)
    if len(x) < 2:
        raise InvalidArgument("temporal_flickering needs at least 2 frames")
    d = np.abs(np.diff(x, axis=0)).mean(axis=1)  # (N-1) x H x W
    low = d < np.percentile(d, 90)
    if not low.any():
        low = np.ones_like(low)
    per_pair = []
    for dt, lt in zip(d, low):
        per_pair.append(dt[lt].mean() if lt.any() else dt.mean())
    return float(np.clip(1.0 - np.mean(per_pair), 0.0, 1.0))


def motion_smoothness(video) -> float:
    x = _frames(video)
    if len(x) < 3:
        raise InvalidArgument("motion_smoothness needs at least 3 frames")
    ratios = []
    for t in range(1, len(x) - 1):
        acc = np.abs(x[t + 1] - 2 * x[t] + x[t - 1]).sum()
        vel = np.abs(x[t + 1] - x[t - 1]).sum()
        ratios.append(acc / (2 * vel + SMOOTH_EPS))
    return float(np.clip(1.0 - np.mean(ratios), 0.0, 1.0))


def _dilate(m, r=DILATE):
    if r <= 0:
        return m
    st = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
    return np.stack([binary_dilation(f, st) for f in m])


def _pooled(frame, keep):
    """Block means over kept pixels, centred; blocks without kept pixels are 0."""
    c, h, w = frame.shape
    hb, wb = h // POOL, w // POOL
    f = (frame * keep)[:, :hb * POOL, :wb * POOL].reshape(c, hb, POOL, wb, POOL).sum((2, 4))
    n = keep[:hb * POOL, :wb * POOL].reshape(hb, POOL, wb, POOL).sum((1, 3))
    feat = np.where(n > 0, f / np.maximum(n, 1), 0.0)
    valid = np.broadcast_to(n > 0, feat.shape)
    feat = feat - feat[valid].mean() if valid.any() else feat
    return np.where(valid, feat, 0.0).ravel()


def background_consistency(video, masks) -> float:
    x = _frames(video)
    m = _masks(masks)
    if m.shape != (x.shape[0], x.shape[2], x.shape[3]):
        raise InvalidArgument(f"mask shape {m.shape} does not match video {x.shape}")
    fg = _dilate(m)
    if len(x) < 2:
        return 1.0
    scores = []
    for t in range(1, len(x)):
        keep = ~(fg[t] | fg[0])
        if not keep.any():
            raise UndefinedRegion(f"no background pixels left in frames 0 and {t}")
        scores.append(_cos01(_pooled(x[0], keep), _pooled(x[t], keep)))
    return float(np.mean(scores))


def _projection(seed, dim_in):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((SUBJECT_DIM, dim_in)) / np.sqrt(dim_in)


def subject_features(video, masks, seed=0):
    """Random-projection features of the masked arm crop per frame (None if empty)."""
    x = _frames(video)
    m = _masks(masks)
    P = _projection(seed, 3 * SUBJECT_SIZE * SUBJECT_SIZE)
    feats = []
    for f, mk in zip(x, m):
        box = crop_box(mk, 0)
        if box is None:
            feats.append(None)
            continue
        rows = np.flatnonzero(mk.any(1))
        cols = np.flatnonzero(mk.any(0))
        # arm pixels relative to mid-grey, everything else neutral, so both
        # colour and silhouette move the feature
        crop = (mk * (f - 0.5))[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        crop = F.interpolate(torch.from_numpy(crop)[None], size=(SUBJECT_SIZE, SUBJECT_SIZE),
                             mode="bilinear", align_corners=False)[0].numpy().ravel()
        feats.append(P @ crop)
    return feats


def subject_consistency(video, masks, seed=0) -> float:
    feats = [f for f in subject_features(video, masks, seed) if f is not None]
    if len(feats) < 2:
        raise UndefinedRegion("subject_consistency needs a non-empty mask on at least 2 frames")
    return float(np.mean([_cos01(a, b) for a, b in zip(feats[:-1], feats[1:])]))


def psnr(a, b, region=None) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if region is not None:
        r = np.broadcast_to(np.asarray(region, bool)[:, None], a.shape)
        if not r.any():
            raise UndefinedRegion("PSNR region is empty")
        a, b = a[r], b[r]
    mse = float(np.mean((a - b) ** 2))
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)


def paired_metrics(output, oracle, source_masks=None) -> dict:
    """PSNR against the paired oracle (full frame and oracle-arm region) and arm IoU.

    With ``source_masks`` the background PSNR outside the 4-px dilation of
    the source arm (and of the oracle arm) is reported as well.
    """
    out = _frames(output)
    ref = oracle.video.data.astype(np.float64)
    if out.shape != ref.shape:
        raise InvalidArgument(f"output {out.shape} and oracle {ref.shape} differ in shape")
    om = oracle.masks.data > 0
    support = difference_mask(out, oracle.background.data) > 0
    res = {"paired_psnr": psnr(out, ref), "arm_psnr": psnr(out, ref, om), "arm_iou": iou(support, om)}
    if source_masks is not None:
        keep = ~(_dilate(_masks(source_masks)) | _dilate(om))
        res["background_psnr"] = psnr(out, ref, keep)
    return res


PER_CLIP_FIELDS = list(PROXIES) + ["paired_psnr", "arm_psnr", "arm_iou", "background_psnr",
                                   "swap_rate"]


def clip_metrics(output, masks, oracle=None, source_masks=None, metrics=None, classifier=None,
                 target=None, projection_seed=0) -> dict:
    wanted = set(metrics or (*PROXIES, "paired", "swap_rate"))
    unknown = wanted - set(PROXIES) - {"paired", "swap_rate"}
    if unknown:
        raise InvalidArgument(f"unknown metrics {sorted(unknown)}")
    row = {}
    if "temporal_flickering" in wanted:
        row["temporal_flickering"] = temporal_flickering(output)
    if "motion_smoothness" in wanted:
        row["motion_smoothness"] = motion_smoothness(output)
    if "background_consistency" in wanted:
        row["background_consistency"] = background_consistency(output, masks)
    if "subject_consistency" in wanted:
        row["subject_consistency"] = subject_consistency(output, masks, projection_seed)
    if "paired" in wanted and oracle is not None:
        row.update(paired_metrics(output, oracle, source_masks))
    if "swap_rate" in wanted and classifier is not None and oracle is not None:
        from .oracle import swap_rate

        row["swap_rate"] = swap_rate(classifier, _frames(output).astype(np.float32),
                                     oracle.background.data, target)
    return row


def _result_dirs(results_dir):
    return sorted(p for p in Path(results_dir).glob("clip_*") if (p / "result.json").exists())


def evaluate_run(results_dir, dataset_dir, out_dir=None, metrics=None, classifier=None,
                 projection_seed=0, label=None) -> dict:
    """Score every result clip against the eval split of ``dataset_dir``.

    Proxies are computed with the oracle (target-arm) masks; clips listed in
    the eval split but absent from ``results_dir`` are reported as missing.
    """
    results_dir = Path(results_dir)
    found = _result_dirs(results_dir)
    if not found:
        raise MissingData(f"no result clips in {results_dir}")
    first = json.loads((found[0] / "result.json").read_text())
    direction = first.get("direction", "A->B")
    src, tgt = direction[0], direction[-1]
    src_dir = Path(dataset_dir) / "eval" / src
    ora_dir = Path(dataset_dir) / "eval" / f"oracle_{tgt}"
    expected = [p.name for p in list_clips(src_dir)]
    if not expected:
        raise MissingData(f"no eval clips in {src_dir}")
    per_clip, missing = {}, []
    have = {p.name: p for p in found}
    for name in expected:
        if name not in have:
            missing.append(name)
            continue
        out = load_frames(have[name])
        oracle = read_clip(ora_dir / name)
        source = read_clip(src_dir / name)
        per_clip[name] = clip_metrics(out, oracle.masks, oracle, source.masks, metrics, classifier,
                                      tgt, projection_seed)
    if missing:
        warnings.warn(f"{len(missing)} eval clips have no results: {missing[:5]}")
    keys = [k for k in PER_CLIP_FIELDS if any(k in r for r in per_clip.values())]
    aggregate = {k: float(np.mean([r[k] for r in per_clip.values()])) for k in keys}
    report = {"version": METRICS_VERSION, "label": label or results_dir.name,
              "direction": direction, "results_dir": str(results_dir),
              "projection_seed": projection_seed, "metrics": keys, "clips": sorted(per_clip),
              "missing": missing, "per_clip": per_clip, "aggregate": aggregate}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: dict, out_dir, figure=True):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    keys = report["metrics"]
    with (out_dir / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip"] + keys)
        for name in report["clips"]:
            w.writerow([name] + [repr(report["per_clip"][name][k]) for k in keys])
        w.writerow(["mean"] + [repr(report["aggregate"][k]) for k in keys])
    if figure:
        plot_report(report, out_dir / "report.png")


def plot_report(report: dict, path):
    """Per-clip distributions of the proxy scores and paired metrics."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = report["metrics"]
    fig, axes = plt.subplots(1, len(keys), figsize=(2.2 * len(keys), 3.2), squeeze=False)
    for ax, k in zip(axes[0], keys):
        vals = [report["per_clip"][c][k] for c in report["clips"]]
        ax.boxplot(vals, widths=0.6)
        ax.set_title(k.replace("_", "\n"), fontsize=8)
        ax.set_xticks([])
        ax.tick_params(labelsize=7)
    fig.suptitle(f"{report['label']} ({report['direction']}, {len(report['clips'])} clips)", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def compare_reports(reports: dict, out_dir):
    """Side-by-side table (CSV + JSON) and bar chart of aggregates for several runs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = [k for k in PER_CLIP_FIELDS if all(k in r["aggregate"] for r in reports.values())]
    table = {name: {k: r["aggregate"][k] for k in keys} for name, r in reports.items()}
    (out_dir / "comparison.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    with (out_dir / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + keys)
        for name, row in table.items():
            w.writerow([name] + [repr(row[k]) for k in keys])
    proxies = [k for k in keys if k in PROXIES or k in ("arm_iou", "swap_rate")]
    db = [k for k in keys if k.endswith("psnr")]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), gridspec_kw={"width_ratios": [max(len(proxies), 1), max(len(db), 1)]})
    width = 0.8 / max(len(table), 1)
    for ax, group, ylabel in ((axes[0], proxies, "score"), (axes[1], db, "dB")):
        for i, (name, row) in enumerate(table.items()):
            ax.bar(np.arange(len(group)) + i * width, [row[k] for k in group], width, label=name)
        ax.set_xticks(np.arange(len(group)) + width * (len(table) - 1) / 2)
        ax.set_xticklabels([k.replace("_", "\n") for k in group], fontsize=7)
        ax.set_ylabel(ylabel)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "comparison.png", dpi=120)
    plt.close(fig)
    return table
