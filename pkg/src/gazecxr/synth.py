"""Seeded synthetic corpus in the on-disk layout the pipeline consumes.

Counts default to 574 eval studies and 1,169 train ids. Images are small
procedural radiograph-like frames; gaze streams are clustered fixation noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .lexicon import load_lexicon

N_EVAL = 574
N_TRAIN = 1169

_POSITIVE = {
    "J18.9": ["{Side} lower lobe consolidation consistent with pneumonia.", "Patchy opacity suggesting pneumonia."],
    "J90": ["{Sev} {side} pleural effusion.", "There is a {sev} {side} pleural effusion."],
    "I51.7": ["The heart is enlarged, compatible with cardiomegaly.", "{Sev} cardiomegaly."],
    "J98.11": ["{Sev} {side} basilar atelectasis.", "Bibasilar atelectasis is noted."],
    "J93.9": ["{Sev} {side} apical pneumothorax.", "There is a {sev} {side} pneumothorax."],
    "J81.0": ["Diffuse interstitial markings consistent with pulmonary edema."],
    "R91.1": ["A {sev} nodule is seen in the {side} upper lobe."],
    "I50.9": ["Findings are compatible with heart failure."],
}
_NORMAL = [
    "No pneumothorax.",
    "No focal consolidation.",
    "The mediastinal contours are normal.",
    "Osseous structures are unremarkable.",
    "No pleural effusion.",
]
_IMPRESSION = {
    "J18.9": "Findings concerning for pneumonia.",
    "J90": "{Side} pleural effusion.",
    "I51.7": "Cardiomegaly.",
    "J98.11": "Atelectasis.",
    "J93.9": "{Side} pneumothorax.",
    "J81.0": "Pulmonary edema.",
    "R91.1": "Pulmonary nodule, follow-up recommended.",
    "I50.9": "Heart failure.",
}
# normal sentences that would contradict a positive finding
_CONFLICTS = {"J90": "pleural effusion", "J93.9": "pneumothorax", "J18.9": "consolidation"}
_SEVERITY = ["mild", "small", "large", "minimal", "severe"]


@dataclass(frozen=True)
class CorpusPaths:
    root: Path
    config: Path


def _fill(template: str, side: str, sev: str) -> str:
    return template.format(side=side, Side=side.capitalize(), sev=sev, Sev=sev.capitalize())


def synth_report(rng: np.random.Generator) -> tuple[str, str, list[str]]:
    codes = sorted(rng.choice(sorted(_POSITIVE), size=int(rng.integers(1, 4)), replace=False).tolist())
    findings, impressions = [], []
    for code in codes:
        side = str(rng.choice(["left", "right"]))
        sev = str(rng.choice(_SEVERITY))
        findings.append(_fill(str(rng.choice(_POSITIVE[code])), side, sev))
        impressions.append(_fill(_IMPRESSION[code], side, sev))
    normals = rng.choice(_NORMAL, size=int(rng.integers(1, 3)), replace=False).tolist()
    findings += [n for n in normals if not any(_CONFLICTS.get(c, "\0") in n for c in codes)]
    order = rng.permutation(len(findings))
    return " ".join(findings[i] for i in order), " ".join(impressions), codes


def synth_vqa(rng: np.random.Generator, codes: list[str], findings: str) -> tuple[str, str]:
    lex = load_lexicon()
    if rng.random() < 0.5:
        code = str(rng.choice(sorted(_POSITIVE)))
        name = lex.get(code).canonical_name
        return f"Is there evidence of {name} in this image?", "yes" if code in codes else "no"
    side = "left" if "left" in findings.lower() else "right" if "right" in findings.lower() else None
    if side:
        return "Which side shows the abnormality?", side
    return "Is the study abnormal?", "yes"


def synth_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 60 + 120 * np.exp(-((xx - 0.5) ** 2) / 0.02)  # mediastinum
    for cx in (0.3, 0.7):
        lung = ((xx - cx) / 0.16) ** 2 + ((yy - 0.5) / 0.32) ** 2 < 1
        img = np.where(lung, img * 0.45, img)
    img += rng.normal(0, 6, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_gaze(rng: np.random.Generator, size: int, seconds: float = 1.5, rate: float = 1000.0) -> np.ndarray:
    n = int(seconds * rate)
    n_fix = int(rng.integers(3, 8))
    centers = rng.uniform(0.1 * size, 0.9 * size, size=(n_fix, 2))
    which = np.sort(rng.integers(0, n_fix, size=n))
    xy = centers[which] + rng.normal(0, size * 0.03, size=(n, 2))
    off = rng.random(n) < 0.02
    xy[off] += rng.choice([-1.0, 1.0], size=(int(off.sum()), 2)) * size
    t = np.arange(n) / rate
    return np.column_stack([t, np.round(xy, 2)])


def _write_gaze(path: Path, samples: np.ndarray) -> None:
    if path.suffix == ".csv":
        lines = ["t,x,y"] + [f"{t:.3f},{x:.2f},{y:.2f}" for t, x, y in samples]
        path.write_text("\n".join(lines) + "\n", "utf-8")
    else:
        rows = [{"t": round(float(t), 3), "x": float(x), "y": float(y)} for t, x, y in samples]
        path.write_text(json.dumps(rows), "utf-8")


CONFIG_TEMPLATE = """\
output_dir = "out"
seed = {seed}
tasks = ["GEN", "SUM", "ERR", "DDX", "VQA"]
corrupt_probability = 0.7317
link_threshold = 0.85

[data]
images = "images"
gaze = "gaze"
reports = "reports.jsonl"
ddx_gold = "ddx.jsonl"
vqa = "vqa.jsonl"
split = "split.json"

[overlay]
dot_radius = 2
alpha_max = 0.85
scale = "linear"

[endpoint]
base_url = "{base_url}"
model_name = "mock-vlm"
max_retries = 2
backoff_initial = 0.0
concurrency = 4
"""


def generate_corpus(
    root: str | Path,
    n_eval: int = N_EVAL,
    n_train: int = N_TRAIN,
    image_size: int = 64,
    seed: int = 0,
    base_url: str = "http://127.0.0.1:8000/v1",
    with_media: bool = True,
) -> CorpusPaths:
    """Write images/, gaze/, reports/ddx/vqa json lines, split.json and config.toml.

    ``with_media=False`` skips images and gaze (text-only corpora for
    calibration checks).
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gaze").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    eval_ids = [f"e{i:05d}" for i in range(n_eval)]
    train_ids = [f"t{i:05d}" for i in range(n_train)]
    reports, ddx, vqa = [], [], []
    for i, sid in enumerate(eval_ids):
        findings, impression, codes = synth_report(rng)
        question, answer = synth_vqa(rng, codes, findings)
        reports.append({"study_id": sid, "findings": findings, "impression": impression})
        ddx.append({"study_id": sid, "icd_codes": codes})
        vqa.append({"study_id": sid, "question": question, "answer": answer})
        if with_media:
            Image.fromarray(synth_image(rng, image_size), mode="L").save(root / "images" / f"{sid}.png")
            suffix = ".csv" if i % 2 == 0 else ".json"
            _write_gaze(root / "gaze" / f"{sid}{suffix}", synth_gaze(rng, image_size))

    def jsonl(name, rows):
        (root / name).write_text("".join(json.dumps(r) + "\n" for r in rows), "utf-8")

    jsonl("reports.jsonl", reports)
    jsonl("ddx.jsonl", ddx)
    jsonl("vqa.jsonl", vqa)
    (root / "split.json").write_text(json.dumps({"train_ids": train_ids, "eval_ids": eval_ids}), "utf-8")
    config = root / "config.toml"
    config.write_text(CONFIG_TEMPLATE.format(seed=seed, base_url=base_url), "utf-8")
    return CorpusPaths(root, config)
