"""Stage orchestration: render -> build -> run -> score, plus validate.

Each stage reads the previous stage's files under ``output_dir`` and
records a per-stage hash in ``run_manifest.json`` so stale artifacts are
detected instead of reused.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import httpx

from . import __version__
from .client import (
    CONDITIONS,
    EndpointConfig,
    ExchangeCache,
    VlmError,
    image_for,
    png_bytes,
    prompt_hash,
    run_batch,
)
from .config import RunConfig
from .extract import (
    HttpEmbedder,
    HttpRecognizer,
    YnAnswer,
    extract_ddx_codes,
    extract_yn,
    vqa_normalize,
)
from .gaze import GazeError, accumulate_heatmap, parse_gaze, validate_recording
from .lexicon import LexiconError, load_lexicon
from .metrics import Cell, as_percent, assemble_report, ddx_score, rouge_l, accuracy
from .overlay import OverlayError, decode_image, encode_image, render_overlay
from .tasks import (
    DatasetSplit,
    ImageRefs,
    OverlapError,
    Report,
    TaskError,
    TaskInstance,
    TaskKind,
    VqaRecord,
    build_ddx,
    build_err,
    build_gen,
    build_sum,
    build_vqa,
    check_split,
    inject_error,
    load_templates,
    parse_ddx_reference,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
GAZE_SUFFIXES = {".csv": "csv", ".json": "json"}


class StageError(RuntimeError):
    """Stage cannot proceed; ``exit_code`` follows the CLI policy."""

    def __init__(self, message: str, exit_code: int = EXIT_CONFIG):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class StageResult:
    exit_code: int = EXIT_OK
    counts: dict = field(default_factory=dict)
    messages: list = field(default_factory=list)


# --- file helpers ----------------------------------------------------------------


def sha256_bytes(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(hashlib.sha256(p).digest())
    return h.hexdigest()


def write_if_changed(path: Path, data: bytes) -> bool:
    """Atomically write ``data`` unless the file already holds it."""
    path = Path(path)
    if path.exists() and path.read_bytes() == data:
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return True


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise StageError(f"{path}:{lineno}: {exc.msg}") from None
    return rows


class Layout:
    def __init__(self, cfg: RunConfig):
        self.root = Path(cfg.output_dir)
        self.overlays = self.root / "overlays"
        self.manifest = self.root / "manifest.jsonl"
        self.cache = self.root / "cache"
        self.report_json = self.root / "report.json"
        self.report_md = self.root / "report.md"
        self.scores = self.root / "scores.jsonl"
        self.run_manifest = self.root / "run_manifest.json"


class RunManifest:
    """Per-stage hashes and completion markers, persisted as json."""

    def __init__(self, path: Path, cfg: RunConfig):
        self.path = path
        try:
            self.doc = json.loads(path.read_text("utf-8"))
        except (FileNotFoundError, ValueError):
            self.doc = {}
        self.doc.setdefault("stages", {})
        self.doc["tool_version"] = __version__
        self.doc["config_hash"] = cfg.config_hash

    def stage(self, name: str) -> dict:
        return self.doc["stages"].get(name, {})

    def mark(self, name: str, **info) -> None:
        self.doc["stages"][name] = {"complete": True, **info}
        self.save()

    def save(self) -> None:
        write_if_changed(self.path, (json.dumps(self.doc, indent=2, sort_keys=True) + "\n").encode())


def render_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps([__version__, cfg.canonical()["overlay"]], sort_keys=True).encode()).hexdigest()


def build_hash(cfg: RunConfig) -> str:
    doc = cfg.canonical()
    keys = ("seed", "tasks", "corrupt_probability", "data")
    templates = load_templates(cfg.data.prompts)
    payload = [__version__, templates.version, templates.templates, {k: doc[k] for k in keys}]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _find(directory: Path, stem: str, suffixes: Iterable[str]) -> Optional[Path]:
    for suf in suffixes:
        p = directory / f"{stem}{suf}"
        if p.exists():
            return p
    return None


def list_images(cfg: RunConfig) -> dict[str, Path]:
    out = {}
    for p in sorted(Path(cfg.data.images).iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.stem not in out:
            out[p.stem] = p
    return out


# --- render -------------------------------------------------------------------------


def _render_one(study_id: str, image_path: Path, gaze_path: Path, cfg: RunConfig, out_dir: Path, spec_hash: str):
    img_bytes = image_path.read_bytes()
    gaze_bytes = gaze_path.read_bytes()
    input_hash = sha256_bytes(img_bytes, gaze_bytes, spec_hash.encode())
    png_path = out_dir / f"{study_id}.png"
    sidecar_path = out_dir / f"{study_id}.json"
    try:
        old = json.loads(sidecar_path.read_text("utf-8"))
        if old.get("input_hash") == input_hash and png_path.exists():
            return "up_to_date"
    except (FileNotFoundError, ValueError):
        pass

    img = decode_image(img_bytes)
    rec = parse_gaze(gaze_bytes, GAZE_SUFFIXES[gaze_path.suffix.lower()], study_id, cfg.overlay.sample_rate_hz)
    summary = validate_recording(rec, img.width, img.height)
    grid = accumulate_heatmap(rec, img.width, img.height, cfg.overlay.cell_size)
    spec = cfg.overlay.spec()
    rgb = render_overlay(img, grid, spec)
    write_if_changed(png_path, encode_image(rgb))
    sidecar = {
        "image_id": study_id,
        "c_max": grid.c_max,
        "n_in_bounds": summary.n_in_bounds,
        "validation": summary.to_dict(),
        "cell_size": grid.cell_size,
        "spec": spec.to_dict(),
        "input_hash": input_hash,
        "tool_version": __version__,
    }
    write_if_changed(sidecar_path, (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode())
    return "rendered"


def cmd_render(cfg: RunConfig) -> StageResult:
    layout = Layout(cfg)
    layout.overlays.mkdir(parents=True, exist_ok=True)
    spec_hash = render_hash(cfg)
    result = StageResult(counts={"rendered": 0, "up_to_date": 0, "skipped": 0, "failed": 0})
    jobs = []
    for sid, img_path in list_images(cfg).items():
        gaze_path = _find(Path(cfg.data.gaze), sid, GAZE_SUFFIXES)
        if gaze_path is None:
            log.warning("no gaze recording for %s; skipping", sid)
            result.messages.append(f"{sid}: no gaze recording")
            result.counts["skipped"] += 1
            continue
        jobs.append((sid, img_path, gaze_path))

    def work(job):
        sid, img_path, gaze_path = job
        try:
            return sid, _render_one(sid, img_path, gaze_path, cfg, layout.overlays, spec_hash), None
        except (GazeError, OverlayError, OSError) as exc:
            return sid, "failed", exc

    workers = cfg.render_workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for sid, status, exc in pool.map(work, jobs):
            result.counts[status] += 1
            if exc is not None:
                log.error("render failed for %s: %s", sid, exc)
                result.messages.append(f"{sid}: {exc}")
    if result.counts["failed"]:
        result.exit_code = EXIT_RUNTIME
    manifest = RunManifest(layout.run_manifest, cfg)
    c = result.counts
    manifest.mark("render", hash=spec_hash, overlays=c["rendered"] + c["up_to_date"],
                  skipped=c["skipped"], failed=c["failed"])
    log.info("render: %s", result.counts)
    return result


# --- build ---------------------------------------------------------------------------


def _load_split(cfg: RunConfig) -> DatasetSplit:
    try:
        return DatasetSplit.from_json(Path(cfg.data.split).read_text("utf-8"))
    except (ValueError, AttributeError) as exc:
        raise StageError(f"bad split file {cfg.data.split}: {exc}") from None


def build_instances(cfg: RunConfig) -> tuple[list[TaskInstance], dict]:
    split = _load_split(cfg)
    try:
        check_split(split)
    except OverlapError as exc:
        raise StageError(str(exc)) from None
    layout = Layout(cfg)
    templates = load_templates(cfg.data.prompts)
    lexicon = load_lexicon(cfg.data.lexicon)
    reports = {r["study_id"]: Report(r["study_id"], r.get("findings", ""), r.get("impression", ""))
               for r in read_jsonl(cfg.data.reports)}
    ddx = {}
    if cfg.data.ddx_gold:
        ddx = {r["study_id"]: r.get("icd_codes", []) for r in read_jsonl(cfg.data.ddx_gold)}
    vqa: dict[str, list[VqaRecord]] = {}
    if cfg.data.vqa:
        for r in read_jsonl(cfg.data.vqa):
            vqa.setdefault(r["study_id"], []).append(VqaRecord(r["study_id"], r.get("question", ""), r.get("answer", "")))

    images = list_images(cfg)
    counts = {k.value: 0 for k in cfg.tasks}
    counts["skipped_studies"] = 0
    counts["skipped_instances"] = 0
    instances = []
    for sid in sorted(split.eval_ids):
        raw = images.get(sid)
        overlay = layout.overlays / f"{sid}.png"
        if raw is None or not overlay.exists():
            log.warning("%s: missing %s; skipping study", sid, "image" if raw is None else "overlay")
            counts["skipped_studies"] += 1
            continue
        refs = ImageRefs(str(raw), str(overlay))
        report = reports.get(sid)
        for kind in cfg.tasks:
            try:
                if kind is TaskKind.GEN and report:
                    made = [build_gen(report, refs, templates)]
                elif kind is TaskKind.SUM and report:
                    made = [build_sum(report, refs, templates)]
                elif kind is TaskKind.ERR and report:
                    corrupted, injection = inject_error(report, cfg.seed, cfg.corrupt_probability, lexicon)
                    made = [build_err(corrupted, refs, injection, templates)]
                elif kind is TaskKind.DDX and sid in ddx:
                    made = [build_ddx(sid, ddx[sid], refs, templates)]
                elif kind is TaskKind.VQA and sid in vqa:
                    made = [build_vqa(rec, refs, templates, index=i) for i, rec in enumerate(vqa[sid])]
                else:
                    made = []
            except TaskError as exc:
                log.warning("%s %s: %s", sid, kind.value, exc)
                counts["skipped_instances"] += 1
                continue
            instances.extend(made)
            counts[kind.value] += len(made)
    return instances, counts


def cmd_build(cfg: RunConfig) -> StageResult:
    layout = Layout(cfg)
    instances, counts = build_instances(cfg)
    data = "".join(inst.to_json() + "\n" for inst in instances).encode("utf-8")
    changed = write_if_changed(layout.manifest, data)
    for task in cfg.tasks:
        log.info("build: %d %s instances", counts[task.value], task.value)
    manifest = RunManifest(layout.run_manifest, cfg)
    manifest.mark("build", hash=build_hash(cfg), manifest_sha256=hashlib.sha256(data).hexdigest(), counts=counts)
    return StageResult(counts={**counts, "written": int(changed), "instances": len(instances)})


def load_manifest(cfg: RunConfig) -> list[TaskInstance]:
    layout = Layout(cfg)
    if not layout.manifest.exists():
        raise StageError(f"no instance manifest at {layout.manifest}; run `build` first")
    state = RunManifest(layout.run_manifest, cfg).stage("build")
    data = layout.manifest.read_bytes()
    if state.get("hash") != build_hash(cfg) or state.get("manifest_sha256") != hashlib.sha256(data).hexdigest():
        raise StageError("instance manifest is stale for this config; rerun `build`")
    wanted = {k.value for k in cfg.tasks}
    return [i for i in map(TaskInstance.from_json, data.decode("utf-8").splitlines()) if i.kind.value in wanted]


# --- run ------------------------------------------------------------------------------


def cmd_run(cfg: RunConfig, condition: str = "both", client: Optional[httpx.Client] = None) -> StageResult:
    conditions = list(CONDITIONS) if condition == "both" else [condition]
    instances = load_manifest(cfg)
    layout = Layout(cfg)
    cache = ExchangeCache(layout.cache)
    exchanges = run_batch(instances, conditions, cfg.endpoint, cache, client=client)
    statuses = {f"{e.instance_id}|{e.condition}": e.status for e in exchanges}
    errors = [e for e in exchanges if e.status != "success"]
    counts = {
        "dispatched": sum(1 for e in exchanges if not e.cached),
        "cached": sum(1 for e in exchanges if e.cached),
        "errors": len(errors),
    }
    for e in errors[:20]:
        log.error("%s [%s]: %s", e.instance_id, e.condition, e.error)
    manifest = RunManifest(layout.run_manifest, cfg)
    prior = manifest.stage("run").get("exchanges", {})
    manifest.mark("run", model_name=cfg.endpoint.model_name, exchanges={**prior, **statuses})
    log.info("run: %s", counts)
    return StageResult(exit_code=EXIT_RUNTIME if errors else EXIT_OK, counts=counts,
                       messages=[f"{e.instance_id} [{e.condition}]: {e.error}" for e in errors])


# --- score ----------------------------------------------------------------------------


def _lookup(cache: ExchangeCache, inst: TaskInstance, condition: str, endpoint: EndpointConfig, digests: dict):
    ref = image_for(inst, condition)
    if ref not in digests:
        try:
            digests[ref] = hashlib.sha256(png_bytes(ref)).hexdigest()
        except (VlmError, OSError):
            digests[ref] = None
    if digests[ref] is None:
        return None
    key = cache.key(inst.instance_id, condition, endpoint.model_name, prompt_hash(inst.prompt, digests[ref]))
    return cache.get(key)


def score_instances(cfg: RunConfig, instances: list[TaskInstance], responses: dict) -> tuple[dict, list[dict]]:
    """Score cached responses. ``responses`` maps (instance_id, condition) -> text."""
    lexicon = load_lexicon(cfg.data.lexicon)
    ner = embedder = None
    if cfg.services.ner_url:
        ner = HttpRecognizer(cfg.services.ner_url, cfg.services.timeout)
    if cfg.services.embed_url:
        embedder = HttpEmbedder(cfg.services.embed_url, cfg.services.timeout)

    rows = []
    cells: dict = {}
    for kind in cfg.tasks:
        cells[kind.value] = {}
        subset = [i for i in instances if i.kind is kind]
        for cond in CONDITIONS:
            answered = [(i, responses[(i.instance_id, cond)]) for i in subset if (i.instance_id, cond) in responses]
            if not answered:
                cells[kind.value][cond] = Cell(skipped=True, n=0, detail={"n_missing": len(subset)})
                continue
            detail = {"n_missing": len(subset) - len(answered)}
            unparseable = 0
            if kind in (TaskKind.GEN, TaskKind.SUM):
                scores = [rouge_l(text, i.reference) for i, text in answered]
                value = sum(s.f1 for s in scores) / len(scores)
                detail["precision"] = as_percent(sum(s.precision for s in scores) / len(scores))
                detail["recall"] = as_percent(sum(s.recall for s in scores) / len(scores))
                for (i, _), s in zip(answered, scores):
                    rows.append({"instance_id": i.instance_id, "condition": cond, "rouge_l_f1": s.f1})
            elif kind is TaskKind.ERR:
                pairs = [(extract_yn(text), i.reference) for i, text in answered]
                unparseable = sum(p is YnAnswer.UNPARSEABLE for p, _ in pairs)
                value = accuracy(pairs)
                for (i, _), (p, g) in zip(answered, pairs):
                    rows.append({"instance_id": i.instance_id, "condition": cond, "extracted": p.value, "gold": g})
            elif kind is TaskKind.VQA:
                pairs = [(vqa_normalize(text), i.reference) for i, text in answered]
                unparseable = sum(not p for p, _ in pairs)
                value = accuracy(pairs)
                for (i, _), (p, g) in zip(answered, pairs):
                    rows.append({"instance_id": i.instance_id, "condition": cond, "extracted": p, "gold": g})
            else:
                per = []
                for i, text in answered:
                    pred = extract_ddx_codes(text, lexicon, ner, embedder, cfg.link_threshold)
                    gold = parse_ddx_reference(i.reference)
                    per.append((pred, gold))
                    unparseable += not pred
                    rows.append({"instance_id": i.instance_id, "condition": cond,
                                 "predicted": sorted(pred), "gold": sorted(gold)})
                s = ddx_score(per, cfg.ddx_average)
                value = s.f1
                detail.update(precision=as_percent(s.precision), recall=as_percent(s.recall),
                              n_correct=s.n_correct, n_predicted=s.n_predicted, n_gold=s.n_gold)
            cells[kind.value][cond] = Cell(score=as_percent(value), n=len(answered),
                                           n_unparseable=unparseable, detail=detail)
    return cells, rows


def cmd_score(cfg: RunConfig) -> StageResult:
    layout = Layout(cfg)
    instances = load_manifest(cfg)
    cache = ExchangeCache(layout.cache)
    responses = {}
    digests: dict = {}
    for inst in instances:
        for cond in CONDITIONS:
            ex = _lookup(cache, inst, cond, cfg.endpoint, digests)
            if ex is not None and ex.status == "success":
                responses[(inst.instance_id, cond)] = ex.response_text
    cells, rows = score_instances(cfg, instances, responses)
    report = assemble_report(cells, cfg.endpoint.model_name, [k.value for k in cfg.tasks])
    write_if_changed(layout.report_json, report.to_json().encode("utf-8"))
    write_if_changed(layout.report_md, report.to_markdown().encode("utf-8"))
    write_if_changed(layout.scores, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode("utf-8"))
    RunManifest(layout.run_manifest, cfg).mark("score", n_responses=len(responses))
    skipped = [f"{t}/{c}" for t, row in report.cells.items() for c, cell in row.items() if cell.skipped]
    return StageResult(counts={"responses": len(responses), "skipped_cells": len(skipped)},
                       messages=[f"skipped: {s}" for s in skipped])


# --- validate ---------------------------------------------------------------------------


def cmd_validate(cfg: RunConfig) -> StageResult:
    """Read-only diagnostics; errors set exit code 1, warnings do not."""
    result = StageResult()
    errors, warnings = [], []
    errors += cfg.missing_paths()
    if errors:
        result.messages = [f"error: {m}" for m in errors]
        result.exit_code = EXIT_CONFIG
        return result
    try:
        lex = load_lexicon(cfg.data.lexicon)
        result.counts["lexicon_entries"] = len(lex)
    except (LexiconError, OSError) as exc:
        errors.append(f"lexicon: {exc}")
    try:
        load_templates(cfg.data.prompts)
    except (TaskError, OSError, ValueError) as exc:
        errors.append(f"prompts: {exc}")
    try:
        split = _load_split(cfg)
        check_split(split)
        result.counts["eval_ids"] = len(split.eval_ids)
    except (StageError, OverlapError) as exc:
        errors.append(f"split: {exc}")
    for name in ("reports", "ddx_gold", "vqa"):
        path = getattr(cfg.data, name)
        if path is not None:
            try:
                read_jsonl(path)
            except StageError as exc:
                errors.append(f"{name}: {exc}")

    checked = 0
    for sid, img_path in list_images(cfg).items():
        gaze_path = _find(Path(cfg.data.gaze), sid, GAZE_SUFFIXES)
        if gaze_path is None:
            warnings.append(f"{sid}: no gaze recording")
            continue
        try:
            img = decode_image(img_path.read_bytes())
            rec = parse_gaze(gaze_path.read_bytes(), GAZE_SUFFIXES[gaze_path.suffix.lower()], sid)
        except (GazeError, OverlayError) as exc:
            errors.append(f"{sid}: {exc}")
            continue
        s = validate_recording(rec, img.width, img.height)
        checked += 1
        if s.n_in_bounds == 0:
            errors.append(f"{sid}: no gaze sample falls inside the {img.width}x{img.height} image")
        elif s.n_out_of_bounds > s.n_in_bounds:
            warnings.append(f"{sid}: {s.n_out_of_bounds}/{s.n_total} samples out of bounds")
        if not s.monotone_time:
            warnings.append(f"{sid}: timestamps are not monotone")
    result.counts["recordings_checked"] = checked
    result.counts["errors"] = len(errors)
    result.counts["warnings"] = len(warnings)
    result.messages = [f"error: {m}" for m in errors] + [f"warning: {m}" for m in warnings]
    result.exit_code = EXIT_CONFIG if errors else EXIT_OK
    return result
