"""End-to-end orchestration: retrieval, filtering, generation, batch runs,
evaluation, and the external alignment-tool invocation.

Each processed record leaves a replayable trace (its hits, the pool snapshot
after every stage that ran, the rendered context, prompt, and answer) as a
canonical JSON artifact. Timings go to a sidecar file so artifacts stay
byte-identical across reruns of the same configuration. Batch runs are
resumable: a record is skipped when its artifact already exists with the
current config digest.
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .annotations import AnnotationIndex
from .config import PipelineConfig, default_provenance
from .denoise import (
    assemble_context,
    dbscan,
    embed_values,
    render_context,
    select_anchor_clusters,
)
from .gateway import Gateway
from .homology import (
    AMINO_ALPHABET,
    EvidencePool,
    HomologHit,
    Stage,
    assemble_raw_pool,
    parse_blast_tabular,
    rank_and_select,
)
from .metrics import EntityLexicon, aggregate, render_table, rows_to_jsonl, score_record
from .tag_filter import (
    FilterModel,
    build_distillation_set,
    make_query_context,
    segment_ig,
    snippet_document,
    split_fragments,
    gate,
)

logger = logging.getLogger(__name__)

NO_EVIDENCE_NOTE = "(no evidence retrieved)"
_SAFE_ID_RE = re.compile(r"[^A-Za-z0-9._\-]")

BLAST_OUTFMT = "6 qseqid sseqid pident length nident evalue bitscore"


class DatasetError(ValueError):
    pass


class BlastInvocationError(RuntimeError):
    pass


@dataclass(frozen=True)
class QARecord:
    id: str
    instruction: str
    sequence: str
    task: str
    instruction_type: str
    answer: Optional[str] = None

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError(f"record {self.id!r}: instruction is empty")
        bad = set(self.sequence.upper()) - AMINO_ALPHABET
        if bad:
            raise ValueError(f"record {self.id!r}: invalid residues {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "QARecord":
        missing = [k for k in ("id", "instruction", "sequence", "task", "instruction_type") if k not in d]
        if missing:
            raise ValueError(f"record missing fields {missing}")
        return cls(
            id=str(d["id"]),
            instruction=d["instruction"],
            sequence=d["sequence"],
            task=d["task"],
            instruction_type=d["instruction_type"],
            answer=d.get("answer"),
        )


def read_dataset(path: str | Path) -> list[QARecord]:
    """Strict reader: any malformed line raises."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(QARecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise DatasetError(f"{path}:{line_no}: {exc}") from exc
    return records


def iter_dataset_lenient(path: str | Path):
    """Yield (record | None, identifier, error | None) per non-blank line."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                yield QARecord.from_dict(data), str(data.get("id", f"line-{line_no}")), None
            except (json.JSONDecodeError, ValueError) as exc:
                ident = f"line-{line_no}"
                try:
                    ident = str(json.loads(line).get("id", ident))
                except Exception:
                    pass
                yield None, ident, str(exc)


def build_prompt(record: QARecord, context: str) -> str:
    """Frozen generation prompt; the no-evidence note replaces an empty context."""
    evidence = context if context else NO_EVIDENCE_NOTE
    return (
        "You are given a protein sequence and a question about it.\n"
        f"Instruction: {record.instruction}\n"
        f"Sequence: {record.sequence}\n"
        "Evidence:\n"
        f"{evidence}\n"
        "Answer:"
    )


@dataclass
class RunArtifact:
    record_id: str
    task: str
    instruction_type: str
    mode: str
    seed: int
    config_digest: str
    code_version: str
    hits: list = field(default_factory=list)            # all parsed hits, input order
    selected_hits: list = field(default_factory=list)   # ranked survivors
    pools: dict = field(default_factory=dict)           # stage name -> pool dict
    context: str = ""
    prompt: str = ""
    answer: Optional[str] = None
    reference: Optional[str] = None
    warnings: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)         # volatile; sidecar only

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "task": self.task,
            "instruction_type": self.instruction_type,
            "mode": self.mode,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "code_version": self.code_version,
            "hits": [h.to_dict() for h in self.hits],
            "selected_hits": [h.to_dict() for h in self.selected_hits],
            "pools": self.pools,
            "context": self.context,
            "prompt": self.prompt,
            "answer": self.answer,
            "reference": self.reference,
            "warnings": self.warnings,
            "errors": self.errors,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def replay_context(artifact: dict) -> str:
    """Re-render the final context from the stored pool snapshots alone."""
    pools = artifact.get("pools", {})
    for stage_name in ("vertical", "horizontal", "raw"):
        if stage_name in pools:
            return render_context(EvidencePool.from_dict(pools[stage_name]))
    return ""


def safe_filename(record_id: str) -> str:
    return _SAFE_ID_RE.sub("_", record_id)


class Pipeline:
    """Loads the shared resources for a config and executes queries."""

    def __init__(self, config: PipelineConfig, transport=None):
        config.validate_for_mode()
        self.config = config
        self.digest = config.digest()
        self.gateway = Gateway(cache_dir=config.paths.cache_dir, transport=transport)
        self.index: Optional[AnnotationIndex] = None
        if config.paths.index_dir:
            self.index = AnnotationIndex.load(config.paths.index_dir)
        self.filter_model: Optional[FilterModel] = None
        if config.needs_filter_model():
            self.filter_model = FilterModel.load(config.paths.filter_model)
        self.hits_by_query: dict[str, list[HomologHit]] = {}
        if config.paths.hits:
            with open(config.paths.hits, "r", encoding="utf-8") as fh:
                for hit in parse_blast_tabular(fh):
                    self.hits_by_query.setdefault(hit.query_id, []).append(hit)

    # -- single query --------------------------------------------------------

    def run_query(self, record: QARecord) -> RunArtifact:
        cfg = self.config
        artifact = RunArtifact(
            record_id=record.id,
            task=record.task,
            instruction_type=record.instruction_type,
            mode=cfg.mode,
            seed=cfg.seed,
            config_digest=self.digest,
            code_version=__version__,
            reference=record.answer,
        )
        t0 = time.perf_counter()

        hits = self.hits_by_query.get(record.id, [])
        artifact.hits = list(hits)
        empty = EvidencePool(stage=Stage.RAW, homologs=())
        raw_pool = empty
        try:
            selected = rank_and_select(hits, cfg.retrieval, query_length=len(record.sequence))
            artifact.selected_hits = selected
            if self.index is not None and selected:
                raw_pool = assemble_raw_pool(selected, self.index, cfg.retrieval.resolve_go)
            elif selected and self.index is None:
                raise RuntimeError("no annotation index configured (paths.index_dir)")
        except Exception as exc:
            artifact.errors.append({"stage": "retrieval", "error": f"{type(exc).__name__}: {exc}"})
            raw_pool = empty
        artifact.pools["raw"] = raw_pool.to_dict()
        artifact.warnings.extend(raw_pool.warnings)
        artifact.timings["retrieval"] = time.perf_counter() - t0

        final_pool = raw_pool
        if cfg.mode in ("horizontal_only", "full_2d"):
            t1 = time.perf_counter()
            try:
                final_pool = gate(raw_pool, self.filter_model, record.instruction)
                artifact.pools["horizontal"] = final_pool.to_dict()
            except Exception as exc:
                artifact.errors.append({
                    "stage": "horizontal", "error": f"{type(exc).__name__}: {exc}",
                })
            artifact.timings["horizontal"] = time.perf_counter() - t1

        if cfg.mode in ("vertical_only", "full_2d"):
            t2 = time.perf_counter()
            try:
                vertical_pool, context = self._vertical(final_pool, artifact)
                artifact.pools["vertical"] = vertical_pool.to_dict()
                final_pool = vertical_pool
                artifact.context = context
            except Exception as exc:
                artifact.errors.append({
                    "stage": "vertical", "error": f"{type(exc).__name__}: {exc}",
                })
                artifact.context = render_context(final_pool)
            artifact.timings["vertical"] = time.perf_counter() - t2
        else:
            artifact.context = render_context(final_pool)

        t3 = time.perf_counter()
        artifact.prompt = build_prompt(record, artifact.context)
        try:
            artifact.answer = self.gateway.generate(cfg.generator, artifact.prompt, cfg.generation)
        except Exception as exc:
            artifact.errors.append({"stage": "generation", "error": f"{type(exc).__name__}: {exc}"})
        artifact.timings["generation"] = time.perf_counter() - t3
        return artifact

    def _vertical(self, pool: EvidencePool, artifact: RunArtifact) -> tuple[EvidencePool, str]:
        flat = pool.snippets()
        if not flat:
            return assemble_context(pool, [])
        vectors = embed_values(
            self.gateway.embedder_handle(self.config.embedder), [s.value for s in flat]
        )
        cluster_set = dbscan(vectors, self.config.denoise)
        selection = select_anchor_clusters(cluster_set, pool, self.config.denoise.anchor_top_m)
        artifact.warnings.extend(selection.warnings)
        return assemble_context(pool, selection.indices)

    # -- batch ----------------------------------------------------------------

    def run_batch(self, dataset_path: str | Path, out_dir: str | Path) -> dict:
        out = Path(out_dir)
        artifacts_dir = out / "artifacts"
        timings_dir = out / "timings"
        artifacts_dir.mkdir(parents=True, exist_ok=True)
        timings_dir.mkdir(parents=True, exist_ok=True)

        todo: list[QARecord] = []
        skipped_malformed: list[str] = []
        skipped_existing = 0
        for record, ident, error in iter_dataset_lenient(dataset_path):
            if record is None:
                logger.warning("skipping malformed record %s: %s", ident, error)
                skipped_malformed.append(ident)
                continue
            path = artifacts_dir / f"{safe_filename(record.id)}.json"
            if path.exists():
                try:
                    existing = json.loads(path.read_text(encoding="utf-8"))
                except json.JSONDecodeError:
                    existing = {}
                if existing.get("config_digest") == self.digest:
                    skipped_existing += 1
                    continue
            todo.append(record)

        failures = 0
        def _one(record: QARecord) -> int:
            artifact = self.run_query(record)
            name = safe_filename(record.id)
            (artifacts_dir / f"{name}.json").write_text(
                artifact.canonical_json(), encoding="utf-8"
            )
            (timings_dir / f"{name}.json").write_text(
                json.dumps(artifact.timings, sort_keys=True, indent=2) + "\n", encoding="utf-8"
            )
            return 1 if artifact.errors else 0

        if todo:
            with ThreadPoolExecutor(max_workers=self.config.max_workers) as pool:
                failures = sum(pool.map(_one, todo))

        summary = {
            "config_digest": self.digest,
            "mode": self.config.mode,
            "seed": self.config.seed,
            "defaults": default_provenance(),
            "total_lines": len(todo) + skipped_existing + len(skipped_malformed),
            "processed": len(todo),
            "skipped_existing": skipped_existing,
            "skipped_malformed": sorted(skipped_malformed),
            "records_with_errors": failures,
        }
        (out / "summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        return summary


def run_eval(
    artifact_dir: str | Path,
    lexicon: EntityLexicon,
    out_prefix: Optional[str | Path] = None,
) -> list:
    """Score every artifact against its stored reference, grouped by task."""
    artifact_dir = Path(artifact_dir)
    if (artifact_dir / "artifacts").is_dir():
        artifact_dir = artifact_dir / "artifacts"
    candidates = sorted(artifact_dir.glob("*.json"))
    if not candidates:
        raise FileNotFoundError(f"no artifacts found under {artifact_dir}")
    rows = []
    missing_reference = 0
    for path in candidates:
        data = json.loads(path.read_text(encoding="utf-8"))
        if "record_id" not in data:
            continue
        reference = data.get("reference")
        if not reference:
            missing_reference += 1
            continue
        candidate = data.get("answer") or ""
        rows.append({
            "id": data["record_id"],
            "task": data.get("task", "unknown"),
            "scores": score_record(candidate, reference, lexicon),
        })
    if not rows:
        raise ValueError(
            f"no scorable artifacts under {artifact_dir} "
            f"({missing_reference} lacked references)"
        )
    table = aggregate(rows, grouping="task")
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{out_prefix}.jsonl").write_text(rows_to_jsonl(table), encoding="utf-8")
        Path(f"{out_prefix}.txt").write_text(
            render_table(table) + f"\n\nexcluded (no reference): {missing_reference}\n",
            encoding="utf-8",
        )
    return table


def run_blast(config: PipelineConfig, fasta_path: str | Path, out_path: str | Path) -> dict:
    """Invoke the external alignment binary with the required tabular columns.

    Returns run metadata including the exact command line. A missing binary
    is an instructive error pointing at the --hits bypass.
    """
    binary = config.blast.binary
    if not binary or not (Path(binary).exists() or shutil.which(binary)):
        raise BlastInvocationError(
            f"alignment binary {binary!r} not found; either install it and set "
            f"blast.binary, or bypass live search with --hits <precomputed tsv>"
        )
    if not config.blast.db:
        raise BlastInvocationError("blast.db is not configured")
    command = [
        binary,
        "-query", str(fasta_path),
        "-db", config.blast.db,
        "-outfmt", BLAST_OUTFMT,
        "-evalue", str(config.blast.evalue),
        "-max_target_seqs", str(config.blast.max_target_seqs),
        "-out", str(out_path),
    ]
    proc = subprocess.run(command, capture_output=True, text=True)
    if proc.returncode != 0:
        raise BlastInvocationError(
            f"alignment run failed with exit code {proc.returncode}: {proc.stderr.strip()}"
        )
    return {"command": command, "returncode": proc.returncode, "out": str(out_path)}


def label_dataset(
    config: PipelineConfig,
    records: Sequence[QARecord],
    index: AnnotationIndex,
    hits_by_query: dict[str, list[HomologHit]],
    gateway: Gateway,
    per_type: int = 100,
):
    """Wire retrieval and the teacher scorer into distillation-set labeling."""
    scorer = gateway.scorer_handle(config.scorer)

    def snippet_source(record: QARecord):
        hits = hits_by_query.get(record.id, [])
        selected = rank_and_select(hits, config.retrieval, query_length=len(record.sequence))
        return assemble_raw_pool(selected, index, config.retrieval.resolve_go).snippets()

    def ig_fn(record: QARecord, snippet) -> float:
        fragments = split_fragments(record.answer)
        return segment_ig(
            scorer,
            make_query_context(record.instruction, record.sequence),
            snippet_document(snippet.tag, snippet.value),
            fragments,
            config.ig,
        )

    return build_distillation_set(
        records,
        snippet_source,
        ig_fn,
        per_type=per_type,
        tau=config.ig.tau,
        seed=config.seed,
    )
