"""File formats, corpus ingestion, and run manifests.

All structured artifacts are JSON with sorted keys and two-space indent,
written atomically (temp file then rename), so identical inputs produce
byte-identical files. Each document carries a format_version field.
"""

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .allocation import AllocationPlan, PlanParams
from .cache import MemoryReport
from .config import ModelConfig
from .errors import FormatError, InputError
from .model import Model, deserialize_model, serialize_model
from .profiling import ImportanceProfile
from .search import CorrelationReport, GridPoint, SearchReport, SweepReport

BOS_ID = 256

PROFILE_VERSION = "bklv-profile-v1"
PLAN_VERSION = "bklv-plan-v1"
SEARCH_VERSION = "bklv-search-v1"
SWEEP_VERSION = "bklv-sweep-v1"
EVAL_VERSION = "bklv-eval-v1"
MANIFEST_VERSION = "bklv-manifest-v1"


# ---------------------------------------------------------------------------
# byte-level tokenizer: ids 0..255 are raw bytes, 256 is BOS

def encode_bytes(data: bytes, add_bos: bool = True) -> list[int]:
    ids = list(data)
    return [BOS_ID] + ids if add_bos else ids


def decode_ids(ids) -> bytes:
    return bytes(int(i) for i in ids if int(i) < 256)


@dataclass
class Corpus:
    sources: list[str]
    token_ids: np.ndarray  # int64, BOS-prefixed per document
    boundaries: list[int]  # start offset of each document


def load_corpus(paths: list[str], vocab_size: int = 257) -> Corpus:
    """Read plain files as raw bytes, one document per file, BOS-prefixed.

    Directories expand to their files in sorted name order.
    """
    if vocab_size < BOS_ID + 1:
        raise InputError(
            f"byte-level corpus needs vocab_size >= {BOS_ID + 1}, got {vocab_size}"
        )
    files: list[str] = []
    for path in paths:
        if os.path.isdir(path):
            files.extend(
                os.path.join(path, name)
                for name in sorted(os.listdir(path))
                if os.path.isfile(os.path.join(path, name))
            )
        else:
            files.append(path)
    if not files:
        raise InputError("corpus is empty: no files found")
    ids: list[int] = []
    boundaries: list[int] = []
    for fname in files:
        with open(fname, "rb") as fh:
            data = fh.read()
        boundaries.append(len(ids))
        ids.extend(encode_bytes(data))
    return Corpus(files, np.asarray(ids, dtype=np.int64), boundaries)


# ---------------------------------------------------------------------------
# low-level helpers

def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    with open(path, "rb") as fh:
        return sha256_bytes(fh.read())


def atomic_write_bytes(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_json(path: str, obj) -> None:
    atomic_write_bytes(path, dump_json(obj))


def read_json(path: str) -> dict:
    with open(path, "rb") as fh:
        try:
            return json.loads(fh.read().decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc


def _require(doc: dict, path: str, version: str) -> None:
    got = doc.get("format_version")
    if got != version:
        raise FormatError(f"{path}: format_version {got!r}, expected {version!r}")


# ---------------------------------------------------------------------------
# weight file

def write_model_file(model: Model, path: str) -> None:
    atomic_write_bytes(path, serialize_model(model))


def read_model_file(path: str) -> Model:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())


# ---------------------------------------------------------------------------
# importance profile

def profile_to_dict(profile: ImportanceProfile, extra: dict | None = None) -> dict:
    doc = {
        "format_version": PROFILE_VERSION,
        "model_id": profile.model_id,
        "prompt_ids": profile.prompt_ids,
        "config": asdict(profile.config),
        "head_similarity": profile.head_similarity.tolist(),
        "kv_importance": profile.kv_importance.tolist(),
        "layer_importance": profile.layer_importance.tolist(),
        "per_token_similarity": (
            None
            if profile.per_token_similarity is None
            else [m.tolist() for m in profile.per_token_similarity]
        ),
    }
    if extra:
        doc.update(extra)
    return doc


def profile_from_dict(doc: dict, path: str = "<memory>") -> ImportanceProfile:
    _require(doc, path, PROFILE_VERSION)
    try:
        per_token = doc["per_token_similarity"]
        return ImportanceProfile(
            model_id=doc["model_id"],
            prompt_ids=list(doc["prompt_ids"]),
            head_similarity=np.asarray(doc["head_similarity"], dtype=np.float64),
            kv_importance=np.asarray(doc["kv_importance"], dtype=np.float64),
            layer_importance=np.asarray(doc["layer_importance"], dtype=np.float64),
            config=ModelConfig(**doc["config"]),
            per_token_similarity=(
                None
                if per_token is None
                else [np.asarray(m, dtype=np.float64) for m in per_token]
            ),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed profile: {exc}") from exc


def write_profile(profile: ImportanceProfile, path: str, extra: dict | None = None) -> None:
    write_json(path, profile_to_dict(profile, extra))


def read_profile(path: str) -> ImportanceProfile:
    return profile_from_dict(read_json(path), path)


# ---------------------------------------------------------------------------
# allocation plan

def plan_to_dict(plan: AllocationPlan, config: ModelConfig) -> dict:
    return {
        "format_version": PLAN_VERSION,
        "strategy": plan.strategy,
        "requested_compression": plan.compression_ratio,
        "achieved_compression": plan.achieved_compression(config),
        "sinks": plan.sinks,
        "params": asdict(plan.params),
        "budgets": plan.budgets.tolist(),
    }


def plan_from_dict(doc: dict, path: str = "<memory>") -> AllocationPlan:
    _require(doc, path, PLAN_VERSION)
    try:
        return AllocationPlan(
            compression_ratio=float(doc["requested_compression"]),
            sinks=int(doc["sinks"]),
            budgets=np.asarray(doc["budgets"], dtype=np.int64),
            strategy=doc["strategy"],
            params=PlanParams(**doc["params"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed plan: {exc}") from exc


def write_plan(plan: AllocationPlan, config: ModelConfig, path: str) -> None:
    write_json(path, plan_to_dict(plan, config))


def read_plan(path: str) -> AllocationPlan:
    return plan_from_dict(read_json(path), path)


# ---------------------------------------------------------------------------
# search report

def search_report_to_dict(report: SearchReport) -> dict:
    return {
        "format_version": SEARCH_VERSION,
        "compression": report.compression,
        "grid": [
            {
                "t": p.t,
                "r": p.r,
                "loss": None if not p.feasible else p.loss,
                "feasible": p.feasible,
            }
            for p in report.grid
        ],
        "best": None if report.best is None else {"t": report.best[0], "r": report.best[1]},
        "best_loss": report.best_loss,
        "uniform_loss": report.uniform_loss,
        "chunks_evaluated": report.chunks_evaluated,
        "tokens_per_chunk": report.tokens_per_chunk,
        "sinks": report.sinks,
        "layer_t": report.layer_t,
        "layer_r": report.layer_r,
    }


def search_report_from_dict(doc: dict, path: str = "<memory>") -> SearchReport:
    _require(doc, path, SEARCH_VERSION)
    try:
        grid = [
            GridPoint(
                t=float(p["t"]),
                r=float(p["r"]),
                loss=float("nan") if p["loss"] is None else float(p["loss"]),
                feasible=bool(p["feasible"]),
            )
            for p in doc["grid"]
        ]
        best = doc["best"]
        return SearchReport(
            compression=float(doc["compression"]),
            grid=grid,
            best=None if best is None else (float(best["t"]), float(best["r"])),
            best_loss=doc["best_loss"],
            uniform_loss=float(doc["uniform_loss"]),
            chunks_evaluated=int(doc["chunks_evaluated"]),
            tokens_per_chunk=int(doc["tokens_per_chunk"]),
            sinks=int(doc["sinks"]),
            layer_t=float(doc["layer_t"]),
            layer_r=float(doc["layer_r"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed search report: {exc}") from exc


def write_search_report(report: SearchReport, path: str) -> None:
    write_json(path, search_report_to_dict(report))


def read_search_report(path: str) -> SearchReport:
    return search_report_from_dict(read_json(path), path)


# ---------------------------------------------------------------------------
# sweep report

def sweep_report_to_dict(report: SweepReport, correlation: CorrelationReport | None = None) -> dict:
    doc = {
        "format_version": SWEEP_VERSION,
        "window": report.window,
        "compression": report.compression,
        "scores": report.scores,
        "bounds": [list(b) for b in report.bounds],
        "correlation": None,
    }
    if correlation is not None:
        doc["correlation"] = asdict(correlation)
    return doc


def sweep_report_from_dict(doc: dict, path: str = "<memory>") -> tuple[SweepReport, CorrelationReport | None]:
    _require(doc, path, SWEEP_VERSION)
    try:
        report = SweepReport(
            window=int(doc["window"]),
            compression=float(doc["compression"]),
            scores=[float(s) for s in doc["scores"]],
            bounds=[tuple(b) for b in doc["bounds"]],
        )
        corr = doc["correlation"]
        return report, None if corr is None else CorrelationReport(**corr)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed sweep report: {exc}") from exc


def write_sweep_report(
    report: SweepReport, path: str, correlation: CorrelationReport | None = None
) -> None:
    write_json(path, sweep_report_to_dict(report, correlation))


def read_sweep_report(path: str) -> tuple[SweepReport, CorrelationReport | None]:
    return sweep_report_from_dict(read_json(path), path)


# ---------------------------------------------------------------------------
# eval report

def eval_report_to_dict(
    loss: float, memory: MemoryReport, plan: AllocationPlan, config: ModelConfig
) -> dict:
    import math

    return {
        "format_version": EVAL_VERSION,
        "loss": loss,
        "perplexity": math.exp(loss),
        "strategy": plan.strategy,
        "requested_compression": plan.compression_ratio,
        "achieved_compression": plan.achieved_compression(config),
        "memory": memory.as_dict(),
    }


def read_eval_report(path: str) -> dict:
    doc = read_json(path)
    _require(doc, path, EVAL_VERSION)
    return doc


# ---------------------------------------------------------------------------
# run manifest

def write_manifest(path: str, command: list[str], files: dict[str, str], extra: dict | None = None) -> None:
    """Record what a command produced: every referenced file's checksum at
    write time plus a timestamp."""
    doc = {
        "format_version": MANIFEST_VERSION,
        "command": list(command),
        "created_unix": time.time(),
        "files": {
            role: {"path": fpath, "sha256": sha256_file(fpath)}
            for role, fpath in files.items()
        },
    }
    if extra:
        doc.update(extra)
    write_json(path, doc)


def read_manifest(path: str) -> dict:
    doc = read_json(path)
    _require(doc, path, MANIFEST_VERSION)
    return doc
