"""Batch command-line interface, one subcommand per pipeline stage.

Exit codes: 0 ok, 2 config, 3 backend, 4 validation, 5 io. Events go to
stderr as one JSON object per line; artifacts only to declared paths.
With --mock and a fixed --seed every run is byte-reproducible.
"""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from .analysis import diversity_row, diversity_score, histogram_csv, pcs_histogram, render_histogram
from .assemble import (
    DatasetEntry,
    ROLE_EASY_NEGATIVE,
    ROLE_HARD_NEGATIVE,
    ROLE_SYN_POSITIVE,
    ROLE_USER,
    assemble,
    generate_instruction_pairs,
    write_manifest,
)
from .backends.base import ImageRef
from .backends.http import HttpChatBackend, HttpEmbeddingBackend, HttpImageBackend
from .backends.mock import CachedEncoder, MockEmbeddingBackend, MockImageBackend
from .backends.scripted import SyntheticChatBackend
from .backends.store import ContentStore
from .builder import build_tree, derive_easy_negative_tree, edit_tree_llm
from .config import PipelineConfig, load_config
from .errors import (
    BackendError,
    ConfigError,
    ContentStoreError,
    PipelineError,
)
from .fsio import atomic_write_text, read_jsonl, write_jsonl
from .pcs import (
    easy_rows,
    filter_easy_negative,
    filter_pcs,
    pcs_rows,
    pcs_score,
)
from .prompts import (
    PromptRole,
    forest_prompts,
    negative_prompts,
    positive_prompts,
    read_plan,
    write_plan,
)
from .tree import (
    ConceptForest,
    ConceptTree,
    Provenance,
    deserialize_document,
    deserialize_tree,
    serialize_tree,
)

EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_VALIDATION = 4
EXIT_IO = 5

IMAGE_MODE_FLAGS = {"finetuned": "finetuned_subject", "base": "base"}


def _event(name: str, **fields) -> None:
    print(json.dumps({"event": name, **fields}, sort_keys=True), file=sys.stderr)


def _fail(code: int, exc: Exception) -> None:
    _event("error", error=type(exc).__name__, message=str(exc))
    raise SystemExit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, exc)
        except BackendError as exc:
            _fail(EXIT_BACKEND, exc)
        except ContentStoreError as exc:
            _fail(EXIT_IO, exc)
        except (PipelineError, ValueError) as exc:
            _fail(EXIT_VALIDATION, exc)
        except OSError as exc:
            _fail(EXIT_IO, exc)

    return wrapper


@dataclass
class CliState:
    config: PipelineConfig
    mock: bool

    def store(self) -> ContentStore:
        return ContentStore(self.config.store)

    def _backend_cfg(self, name: str):
        cfg = self.config.backends.get(name)
        if cfg is None:
            raise ConfigError(
                f"backend {name!r} is not configured; add it to the config "
                "file or pass --mock"
            )
        return cfg

    def chat(self, store: ContentStore):
        if self.mock:
            return SyntheticChatBackend()
        return HttpChatBackend(self._backend_cfg("llm"), store)

    def image(self, store: ContentStore):
        if self.mock:
            return MockImageBackend(store)
        return HttpImageBackend(self._backend_cfg("image"), store)

    def embed(self, store: ContentStore):
        if self.mock:
            return CachedEncoder(MockEmbeddingBackend(store))
        return CachedEncoder(HttpEmbeddingBackend(self._backend_cfg("embed"), store))


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML config file; flags override it.")
@click.option("--mock", is_flag=True, help="Use the deterministic local backends.")
@click.option("--seed", type=int, default=None, help="Pin every stage seed.")
@click.option("--store", "store_path", type=click.Path(), default=None,
              help="Content store directory (overrides config).")
@click.pass_context
def main(ctx, config_path, mock, seed, store_path):
    """Concept-tree synthetic data pipeline."""
    try:
        config = load_config(config_path)
        if seed is not None:
            if seed < 0:
                raise ConfigError("--seed must be non-negative")
            config = config.with_seed(seed)
        if store_path is not None:
            from dataclasses import replace

            config = replace(config, store=store_path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, exc)
    ctx.obj = CliState(config=config, mock=mock)


# ── tree stages ──────────────────────────────────────────────────────────────


@main.command("build-tree")
@click.argument("images", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--concept-id", default=None)
@click.pass_obj
@guarded
def cmd_build_tree(state: CliState, images, out, concept_id):
    """Describe user images and summarize them into a concept tree."""
    store = state.store()
    refs = [store.ingest_file(path) for path in images]
    chat = state.chat(store)
    tree = build_tree(refs, chat, chat, concept_id=concept_id)
    atomic_write_text(out, serialize_tree(tree))
    _event("build_tree_done", out=out, root=tree.root,
           dimensions=len(tree.dimensions))


@main.command("edit-tree")
@click.argument("tree_path", type=click.Path(exists=True))
@click.option("--op", required=True, type=click.Choice(["add", "remove", "modify"]))
@click.option("--times", required=True, type=int)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@guarded
def cmd_edit_tree(state: CliState, tree_path, op, times, out):
    """Apply a counted dimension edit via the language backend."""
    tree = deserialize_tree(Path(tree_path).read_text(encoding="utf-8"))
    store = state.store()
    edited, edits = edit_tree_llm(tree, op, times, state.chat(store))
    atomic_write_text(out, serialize_tree(edited))
    _event("edit_tree_done", out=out, op=op, times=times, edits=len(edits))


@main.command("easy-tree")
@click.argument("tree_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@guarded
def cmd_easy_tree(state: CliState, tree_path, out):
    """Derive a same-shape tree for a different, similar class."""
    tree = deserialize_tree(Path(tree_path).read_text(encoding="utf-8"))
    store = state.store()
    easy = derive_easy_negative_tree(tree, state.chat(store))
    atomic_write_text(out, serialize_tree(easy))
    _event("easy_tree_done", out=out, root=easy.root)


# ── prompts and images ───────────────────────────────────────────────────────

_ROLE_FOR_PROVENANCE = {
    Provenance.USER_BUILT: "positive",
    Provenance.LLM_BUILT: "positive",
    Provenance.DERIVED_EDIT: "hard_negative",
    Provenance.DERIVED_EASY_NEGATIVE: "easy_negative",
}


@main.command("gen-prompts")
@click.argument("doc_path", type=click.Path(exists=True))
@click.option("--role", default=None,
              type=click.Choice(["positive", "hard_negative", "easy_negative"]))
@click.option("--limit", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@guarded
def cmd_gen_prompts(state: CliState, doc_path, role, limit, out):
    """Enumerate an image prompt plan from a tree or forest file."""
    doc = deserialize_document(Path(doc_path).read_text(encoding="utf-8"))
    config = state.config
    if isinstance(doc, ConceptForest):
        n = limit or config.plan_sizes["positive"]
        specs = forest_prompts(doc, n, config.seed)
    else:
        assert isinstance(doc, ConceptTree)
        role = role or _ROLE_FOR_PROVENANCE[doc.provenance]
        n = limit or config.plan_sizes[role]
        if role == "positive":
            specs = positive_prompts(doc, config.subject_token, n)
        else:
            specs = negative_prompts(doc, PromptRole(role), n, config.seed)
    write_plan(out, specs)
    _event("gen_prompts_done", out=out, prompts=len(specs),
           role=specs[0].role.value if specs else None)


@main.command("generate")
@click.argument("plan_path", type=click.Path(exists=True))
@click.option("--mode", default="auto",
              type=click.Choice(["auto", "finetuned", "base"]),
              help="auto: finetuned for positives, base for negatives.")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@guarded
def cmd_generate(state: CliState, plan_path, mode, out):
    """Render every planned prompt to an image in the content store."""
    plan = read_plan(plan_path)
    store = state.store()
    backend = state.image(store)
    rows = []
    for spec in plan:
        if mode == "auto":
            image_mode = (
                "finetuned_subject"
                if spec.role is PromptRole.POSITIVE
                else "base"
            )
        else:
            image_mode = IMAGE_MODE_FLAGS[mode]
        ref = backend.generate_image(spec.text, image_mode, spec.seed)
        rows.append(
            {
                "sample": {
                    "address": ref.address,
                    "width": ref.width,
                    "height": ref.height,
                    "pixel_format": ref.pixel_format,
                },
                "prompt": spec.text,
                "role": spec.role.value,
                "seed": spec.seed,
                "source_tree": spec.source_tree,
                "mode": image_mode,
            }
        )
    write_jsonl(out, rows)
    _event("generate_done", out=out, images=len(rows))


# ── filtering ────────────────────────────────────────────────────────────────


def _row_ref(row: dict) -> ImageRef:
    sample = row["sample"]
    return ImageRef(
        address=sample["address"],
        width=sample["width"],
        height=sample["height"],
        pixel_format=sample.get("pixel_format", "rgb8"),
    )


@main.command("filter")
@click.argument("samples_path", type=click.Path(exists=True))
@click.option("--role", required=True,
              type=click.Choice(["positive", "hard_negative", "easy_negative"]))
@click.option("--tau", default=None, type=float)
@click.option("--ref", "ref_paths", multiple=True, type=click.Path(exists=True),
              help="Reference image (repeatable); required for scored roles.")
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(),
              help="Samples that passed, ready for assembly.")
@click.pass_obj
@guarded
def cmd_filter(state: CliState, samples_path, role, tau, ref_paths, report_path, out):
    """Score samples and keep the ones that clear the role threshold."""
    rows = read_jsonl(samples_path)
    store = state.store()
    encoder = state.embed(store)
    config = state.config
    if role == "easy_negative":
        pairs = [(_row_ref(row), row["prompt"]) for row in rows]
        tau_text = config.thresholds.text if tau is None else tau
        kept, rejected = filter_easy_negative(pairs, encoder, tau_text)
        report = easy_rows(kept + rejected)
        kept_addresses = {r.sample_ref.address: r for r in kept}
        kept_rows = [
            {**row, "similarity": kept_addresses[row["sample"]["address"]].similarity,
             "kept": True}
            for row in rows
            if row["sample"]["address"] in kept_addresses
        ]
    else:
        if not ref_paths:
            raise ConfigError("scored roles need at least one --ref image")
        references = [store.ingest_file(p) for p in ref_paths]
        records = [
            pcs_score(_row_ref(row), references, encoder, config.perturbation, store)
            for row in rows
        ]
        default_tau = (
            config.thresholds.positive
            if role == "positive"
            else config.thresholds.hard_negative
        )
        kept, rejected = filter_pcs(records, role, default_tau if tau is None else tau)
        report = pcs_rows(kept, role) + pcs_rows(rejected, role)
        kept_addresses = {r.sample_ref.address: r for r in kept}
        kept_rows = [
            {**row, "pcs": kept_addresses[row["sample"]["address"]].pcs, "kept": True}
            for row in rows
            if row["sample"]["address"] in kept_addresses
        ]
    write_jsonl(report_path, report)
    write_jsonl(out, kept_rows)
    _event("filter_done", role=role, kept=len(kept_rows),
           rejected=len(rows) - len(kept_rows), report=report_path, out=out)


# ── analysis ─────────────────────────────────────────────────────────────────


@main.command("diversity")
@click.argument("samples_path", type=click.Path(exists=True))
@click.option("--k", default=None, type=int)
@click.option("--label", default="")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@guarded
def cmd_diversity(state: CliState, samples_path, k, label, out):
    """Cluster sample embeddings and report mean centroid distance."""
    rows = read_jsonl(samples_path)
    store = state.store()
    encoder = state.embed(store)
    vectors = [encoder.embed_image(_row_ref(row)) for row in rows]
    config = state.config
    report = diversity_score(
        vectors, k=k if k is not None else config.diversity_k,
        seed=config.diversity_seed,
    )
    payload = diversity_row(report, label=label)
    atomic_write_text(out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _event("diversity_done", out=out, score=report.score, k=report.k, n=len(vectors))


@main.command("report")
@click.argument("report_paths", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
@guarded
def cmd_report(state: CliState, report_paths, out_dir):
    """Summarize filter reports into band tables and CSV histograms."""
    rows = [row for path in report_paths for row in read_jsonl(path)]
    by_role: dict[str, list[dict]] = {}
    for row in rows:
        by_role.setdefault(row["role"], []).append(row)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary_parts = []
    for role in sorted(by_role):
        role_rows = by_role[role]
        scored = [r for r in role_rows if "pcs" in r]
        if scored:
            hist = pcs_histogram(scored, role=role)
            atomic_write_text(out / f"{role}.csv", histogram_csv(hist))
            summary_parts.append(render_histogram(hist))
        else:
            kept = sum(1 for r in role_rows if r.get("kept"))
            summary_parts.append(
                f"role={role} n={len(role_rows)}\n  kept: {kept}/{len(role_rows)}\n"
            )
    atomic_write_text(out / "summary.txt", "\n".join(summary_parts))
    _event("report_done", out=str(out), roles=sorted(by_role))


# ── assembly ─────────────────────────────────────────────────────────────────

_ROLE_BY_PLAN = {
    "positive": ROLE_SYN_POSITIVE,
    "easy_negative": ROLE_EASY_NEGATIVE,
    "hard_negative": ROLE_HARD_NEGATIVE,
}


def _entries_from_file(path: str | None, role: str) -> list[DatasetEntry]:
    if path is None:
        return []
    entries = []
    for row in read_jsonl(path):
        entries.append(
            DatasetEntry(
                concept_id=row["source_tree"],
                role=role,
                sample_ref=_row_ref(row),
                prompt=row["prompt"],
                pcs=row.get("pcs"),
                seed=row["seed"],
                kept=row.get("kept"),
            )
        )
    return entries


@main.command("assemble")
@click.option("--tree", "tree_path", required=True, type=click.Path(exists=True))
@click.option("--user", "user_paths", multiple=True, type=click.Path(exists=True))
@click.option("--pos", "pos_path", default=None, type=click.Path(exists=True))
@click.option("--easy", "easy_path", default=None, type=click.Path(exists=True))
@click.option("--hard", "hard_path", default=None, type=click.Path(exists=True))
@click.option("--pairs", "n_pairs", default=None, type=int,
              help="Instruction pairs per image (default from config).")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@guarded
def cmd_assemble(state: CliState, tree_path, user_paths, pos_path, easy_path,
                 hard_path, n_pairs, out):
    """Union the four sample pools into a training manifest."""
    tree = deserialize_tree(Path(tree_path).read_text(encoding="utf-8"))
    store = state.store()
    user_entries = [
        DatasetEntry(
            concept_id=tree.concept_id,
            role=ROLE_USER,
            sample_ref=store.ingest_file(path),
        )
        for path in user_paths
    ]
    pos_entries = _entries_from_file(pos_path, ROLE_SYN_POSITIVE)
    easy_entries = _entries_from_file(easy_path, ROLE_EASY_NEGATIVE)
    hard_entries = _entries_from_file(hard_path, ROLE_HARD_NEGATIVE)
    config = state.config
    pairs = config.instruction_pairs if n_pairs is None else n_pairs
    if pairs:
        chat = state.chat(store)
        user_entries = [generate_instruction_pairs(e, chat, pairs) for e in user_entries]
        pos_entries = [generate_instruction_pairs(e, chat, pairs) for e in pos_entries]
        easy_entries = [generate_instruction_pairs(e, chat, pairs) for e in easy_entries]
        hard_entries = [generate_instruction_pairs(e, chat, pairs) for e in hard_entries]
    manifest = assemble(
        user_entries, pos_entries, easy_entries, hard_entries,
        config=config.digest_payload(),
    )
    write_manifest(manifest, out)
    _event("assemble_done", out=out, counts=manifest.counts,
           config_digest=manifest.config_digest)


if __name__ == "__main__":
    main()
