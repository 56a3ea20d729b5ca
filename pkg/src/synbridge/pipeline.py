"""Stage orchestration for the command line.

Every stage output is named ``<stage>-<hash>`` where the hash covers the
stage's own config section, the run seed and the hashes of everything
upstream (input files are hashed by content). A downstream stage looks for
exactly the upstream names its current config implies, so a changed config
can never pick up a stale checkpoint: it reports ``MissingArtifact`` instead.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path

from ._fileutil import atomic_write
from .config import RunConfig, stable_hash
from .dataio import DatasetSplit, EmbeddingBank, generate_synthetic, load_bank, manifest_path, save_bank
from .distill import load_stage1, train_stage1
from .errors import MissingArtifact
from .fusion import dump_weights, evaluate, load_heads, meta_train
from .synmine import (
    attach_descriptors,
    make_provider,
    mine_descriptions,
    read_descriptions,
    write_descriptions,
)
from .vsbird import BridgePairset, load_bridge, train_bridge

log = logging.getLogger(__name__)


def _file_digest(path: Path) -> str:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run the upstream command first")
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Pipeline:
    def __init__(self, config: RunConfig):
        self.config = config

    # -- locations ------------------------------------------------------------------

    def artifact(self, stage: str, digest: str, suffix: str = ".synw") -> Path:
        folder = "reports" if stage in ("eval", "sweep") else "checkpoints"
        if stage == "mine":
            return self.config.workdir / "descriptors" / f"{stage}-{digest}{suffix}"
        return self.config.path(folder) / f"{stage}-{digest}{suffix}"

    def _require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{what} {path.name} not found; run the upstream command with this config")
        return path

    def _write_meta(self, path: Path, stage: str, digest: str, section: dict, upstream: dict) -> None:
        meta = {
            "stage": stage,
            "hash": digest,
            "seed": self.config.run.seed,
            "config": section,
            "upstream": upstream,
        }
        atomic_write(path.with_suffix(".meta.json"), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())

    # -- hashes ---------------------------------------------------------------------

    def data_hash(self) -> str:
        cfg = self.config
        parts = []
        for key in ("student_visual", "teacher_text", "split"):
            parts.append(_file_digest(cfg.path(key)))
        teacher = cfg.path("teacher_visual")
        parts.append(_file_digest(teacher) if teacher.exists() else None)
        manifest = manifest_path(cfg.path("student_visual"))
        parts.append(_file_digest(manifest) if manifest.exists() else None)
        return stable_hash("data", parts)

    def distill_hash(self) -> str:
        c = self.config
        return stable_hash("distill", c.section_dict("distill"), c.run.seed, self.data_hash())

    def mine_hash(self) -> str:
        c = self.config
        provider = {k: v for k, v in c.section_dict("mine").items() if k not in ("timeout", "max_in_flight")}
        return stable_hash(
            "mine", provider, c.run.seed, self.data_hash(), _file_digest(c.path("descriptor_bank"))
        )

    def bridge_section(self, alpha=None) -> dict:
        section = self.config.section_dict("bridge")
        if alpha is not None:
            section["alpha"] = float(alpha)
        return section

    def bridge_hash(self, alpha=None) -> str:
        return stable_hash(
            "bridge", self.bridge_section(alpha), self.config.run.seed, self.distill_hash(), self.mine_hash()
        )

    def fusion_hash(self, alpha=None) -> str:
        c = self.config
        return stable_hash(
            "fusion", c.section_dict("fusion"), c.run.seed, self.bridge_hash(alpha), self.distill_hash(), self.mine_hash()
        )

    def eval_hash(self, alpha=None) -> str:
        return stable_hash("eval", self.config.section_dict("eval"), self.config.run.seed, self.fusion_hash(alpha))

    # -- inputs ---------------------------------------------------------------------

    def banks(self):
        cfg = self.config
        student = load_bank(self._require(cfg.path("student_visual"), "bank"))
        text = load_bank(self._require(cfg.path("teacher_text"), "bank"))
        teacher = load_bank(cfg.path("teacher_visual")) if cfg.path("teacher_visual").exists() else None
        split = DatasetSplit.load(self._require(cfg.path("split"), "split file"))
        return student, text, teacher, split

    def descriptors(self):
        path = self._require(self.artifact("mine", self.mine_hash(), ".synb"), "descriptor bank")
        return load_bank(path).rows

    def stage1(self):
        return load_stage1(self._require(self.artifact("distill", self.distill_hash()), "stage-1 checkpoint"),
                           relu=self.config.distill.projector_relu)

    # -- stages ---------------------------------------------------------------------

    def synth_data(self) -> dict:
        cfg = self.config
        data = generate_synthetic(cfg.synthetic)
        save_bank(data.student_visual, cfg.path("student_visual"))
        save_bank(data.teacher_visual, cfg.path("teacher_visual"))
        save_bank(data.teacher_text, cfg.path("teacher_text"))
        if cfg.path("descriptor_bank") != cfg.path("teacher_text"):
            save_bank(data.teacher_text, cfg.path("descriptor_bank"))
        data.split.save(cfg.path("split"))
        return {"student_visual": cfg.path("student_visual"), "split": cfg.path("split")}

    def distill(self) -> Path:
        student, text, teacher, split = self.banks()
        digest = self.distill_hash()
        out = self.artifact("distill", digest)
        history = []
        train_stage1(student, text, split, self.config.distill, teacher, checkpoint=out, history=history)
        self._write_meta(out, "distill", digest, self.config.section_dict("distill"), {"data": self.data_hash()})
        log.info("stage 1 final epoch: %s", history[-1] if history else "no training")
        return out

    def mine(self) -> Path:
        cfg = self.config
        student = load_bank(self._require(cfg.path("student_visual"), "bank"))
        encoded = load_bank(self._require(cfg.path("descriptor_bank"), "descriptor bank"))
        provider = make_provider(cfg.mine)
        records = mine_descriptions(student.categories, provider, cfg.path("cache"), cfg.mine.max_in_flight)
        descriptor_set = attach_descriptors(records, encoded)
        digest = self.mine_hash()
        out = self.artifact("mine", digest, ".synb")
        save_bank(
            EmbeddingBank("teacher_text", descriptor_set.vectors, descriptor_set.category_ids, encoded.categories),
            out,
        )
        write_descriptions(records, out.with_suffix(".jsonl"))
        self._write_meta(out, "mine", digest, {"provider": provider.provider_id}, {"data": self.data_hash()})
        self.last_provider_requests = provider.requests
        return out

    def bridge(self, alpha=None) -> Path:
        projector, classifier = self.stage1()
        descriptors = self.descriptors()
        ids = list(classifier.class_ids)
        pairs = BridgePairset(tuple(ids), classifier.weight, descriptors[ids])
        section = self.bridge_section(alpha)
        cfg = dataclasses.replace(self.config.bridge, alpha=section["alpha"])
        digest = self.bridge_hash(alpha)
        out = self.artifact("bridge", digest)
        train_bridge(pairs, cfg, checkpoint=out)
        self._write_meta(out, "bridge", digest, section,
                         {"distill": self.distill_hash(), "mine": self.mine_hash()})
        return out

    def fuse(self, alpha=None) -> Path:
        student, _, _, split = self.banks()
        projector, _ = self.stage1()
        bridge = load_bridge(self._require(self.artifact("bridge", self.bridge_hash(alpha)), "bridge checkpoint"))
        digest = self.fusion_hash(alpha)
        out = self.artifact("fusion", digest)
        meta_train(student, self.descriptors(), split, bridge, projector, self.config.fusion, checkpoint=out)
        self._write_meta(out, "fusion", digest, self.config.section_dict("fusion"),
                         {"bridge": self.bridge_hash(alpha)})
        return out

    def _eval_models(self, alpha=None):
        heads = load_heads(self._require(self.artifact("fusion", self.fusion_hash(alpha)), "fusion checkpoint"))
        bridge = load_bridge(self._require(self.artifact("bridge", self.bridge_hash(alpha)), "bridge checkpoint"))
        projector, _ = self.stage1()
        return heads, bridge, projector

    def evaluate(self, alpha=None, workers: int = 1):
        ev = self.config.eval
        student, _, _, split = self.banks()
        heads, bridge, projector = self._eval_models(alpha)
        report = evaluate(
            student, self.descriptors(), split, heads, bridge, projector,
            n_way=ev.n_way, k_shot=ev.k_shot, n_query=ev.n_query, num_episodes=ev.episodes,
            seed=self.config.run.seed, lam=ev.lam, score=ev.score, workers=workers,
        )
        digest = self.eval_hash(alpha)
        out = self.artifact("eval", digest, ".json")
        report.write(out, out.with_suffix(".csv") if ev.write_csv else None)
        return report, out

    def dump_weights(self) -> dict:
        ev = self.config.eval
        student, _, _, split = self.banks()
        heads, bridge, _ = self._eval_models()
        dumped = dump_weights(student, self.descriptors(), split, heads, bridge,
                              ev.n_way, ev.k_shot, ev.dump_episodes, self.config.run.seed, ev.lam)
        digest = self.eval_hash()
        sources = {"visual": "student_visual", "prototype": "student_visual", "semantic": "teacher_visual"}
        paths = {}
        for key, (rows, labels) in dumped.items():
            path = self.artifact("eval", f"{digest}-weights-{key}", ".synb")
            save_bank(EmbeddingBank(sources[key], rows, labels, student.categories), path)
            paths[key] = path
        return paths

    def sweep_alpha(self, workers: int = 1):
        """Bridge, fuse and evaluate at each alpha of the sweep grid."""
        rows = []
        for alpha in self.config.sweep.grid():
            self.bridge(alpha)
            self.fuse(alpha)
            report, _ = self.evaluate(alpha, workers)
            wv, wv_ci = report.summary("visual_dominated")
            rows.append({
                "alpha": alpha,
                "visual_dominated_acc": wv,
                "visual_dominated_ci95": wv_ci,
                "fused_acc": report.mean_acc,
                "fused_ci95": report.ci95,
            })
        digest = stable_hash("sweep", self.config.sweep.alphas, [self.eval_hash(r["alpha"]) for r in rows])
        out = self.artifact("sweep", digest, ".tsv")
        atomic_write(out, format_sweep(rows).encode())
        return rows, out


def format_sweep(rows) -> str:
    lines = ["alpha\tvisual_dominated_acc\tvisual_dominated_ci95\tfused_acc\tfused_ci95"]
    for r in rows:
        lines.append(
            f"{r['alpha']:.2f}\t{r['visual_dominated_acc']:.2f}\t{r['visual_dominated_ci95']:.2f}"
            f"\t{r['fused_acc']:.2f}\t{r['fused_ci95']:.2f}"
        )
    return "\n".join(lines) + "\n"


def stored_descriptions(pipeline: Pipeline) -> dict:
    return read_descriptions(pipeline.artifact("mine", pipeline.mine_hash(), ".jsonl"))


def checksum_inputs(config: RunConfig) -> dict:
    """sha256 of every input bank and split file that exists."""
    out = {}
    for key in ("student_visual", "teacher_visual", "teacher_text", "descriptor_bank", "split"):
        path = config.path(key)
        if path.exists():
            out[key] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


__all__ = ["Pipeline", "format_sweep", "checksum_inputs", "stored_descriptions"]
