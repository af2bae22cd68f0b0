"""Command line entry points: run, train, index, eval, report.

Settings come from built-in defaults, then ``--config`` (a flat JSON object
whose keys match the flags), then explicit flags. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .gateway import Gateway, ModelEndpoint
from .metrics import PSNR_INF, load_lexicons, mse, psnr_from_mse, read_pnm, semantic_similarity, srra, ssim, text_stats
from .pipeline import PipelineReport, RunConfig, canonical_json, run_pipeline, train
from .prompts import CatalogError, PromptCatalog, load_catalog
from .rag import IndexBuildError, VectorIndex, build_index, load_index, load_knowledge_base, save_index
from .rlcore import Checkpoint, init_policy, load_checkpoint, save_checkpoint

log = logging.getLogger("rlvlm")

IMAGE_SUFFIXES = {".pgm", ".ppm", ".pnm"}
NOT_APPLICABLE = "n/a"


class UsageError(Exception):
    """Bad flags, config or missing inputs (exit 2)."""


class RunFailure(Exception):
    """Inputs were fine but processing failed (exit 1)."""


# -- settings ------------------------------------------------------------------


def _settings(args: argparse.Namespace) -> dict:
    settings: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            settings = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(settings, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    for key, value in vars(args).items():
        if key in ("command", "config", "func") or value is None:
            continue
        settings[key] = value
    return settings


def _run_config(settings: dict) -> RunConfig:
    try:
        return RunConfig.from_dict(settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run config: {exc}") from exc


def _gateway(settings: dict) -> Gateway:
    gw = settings.get("gateway", {})
    try:
        return Gateway(
            ModelEndpoint.from_dict(gw.get("caption", {})),
            ModelEndpoint.from_dict(gw.get("embed", {})),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid gateway config: {exc}") from exc


def _require(settings: dict, key: str, what: str) -> Path:
    value = settings.get(key)
    if not value:
        raise UsageError(f"{what} path is required (--{key.replace('_', '-')})")
    return Path(value)


def _catalog(settings: dict) -> PromptCatalog:
    path = _require(settings, "prompts", "prompt catalog")
    try:
        return load_catalog(path)
    except CatalogError as exc:
        raise UsageError(f"prompt catalog error: {exc}") from exc


def _index(settings: dict, gateway: Gateway) -> VectorIndex:
    path = _require(settings, "kb", "knowledge base")
    try:
        if path.suffix == ".json":
            return load_index(path)
        return build_index(load_knowledge_base(path), gateway.embed)
    except (FileNotFoundError, IndexBuildError) as exc:
        raise UsageError(f"knowledge base error: {exc}") from exc


def _images(settings: dict) -> list[Path]:
    root = _require(settings, "images", "image directory")
    if not root.is_dir():
        raise UsageError(f"image directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no PNM images in {root}")
    stems = [p.stem for p in files]
    if len(set(stems)) != len(stems):
        raise UsageError(f"image names collide after dropping extensions in {root}")
    return files


def _out_dir(settings: dict) -> Path:
    out = Path(settings.get("out") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, config: RunConfig | None, settings: dict, inputs: dict) -> None:
    doc = {
        "artifact_version": __version__,
        "command": command,
        "seed": config.seed if config else settings.get("seed"),
        "config": config.to_dict() if config else {},
        "gateway": settings.get("gateway", {}),
        "inputs": {k: str(v) for k, v in inputs.items()},
    }
    (out / "manifest.json").write_text(canonical_json(doc), encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands ------------------------------------------------------------------


def cmd_run(settings: dict) -> int:
    config = _run_config(settings)
    catalog = _catalog(settings)
    gateway = _gateway(settings)
    index = _index(settings, gateway)
    images = _images(settings)
    if settings.get("checkpoint"):
        ckpt_path = Path(settings["checkpoint"])
        if not ckpt_path.is_file():
            raise UsageError(f"checkpoint not found: {ckpt_path}")
        try:
            policy = load_checkpoint(ckpt_path).params
        except (ValueError, KeyError) as exc:
            raise UsageError(f"checkpoint error: {exc}") from exc
        if policy.n_actions != len(catalog) or policy.obs_dim != 2 * gateway.dim:
            raise UsageError("checkpoint does not match the prompt catalog size or embedding dimension")
    elif settings.get("fresh"):
        policy = init_policy(2 * gateway.dim, len(catalog), config.hidden, config.seed)
    else:
        raise UsageError("either --checkpoint or --fresh is required")

    out = _out_dir(settings)
    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)

    def one(path: Path) -> PipelineReport:
        return run_pipeline(path.read_bytes(), config, policy, catalog, index, gateway, path.stem)

    jobs = max(1, int(settings.get("jobs") or 1))
    try:
        if jobs == 1:
            reports = [one(p) for p in images]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                reports = list(pool.map(one, images))
    except ValueError as exc:
        raise RunFailure(f"image error: {exc}") from exc

    rows = []
    for rep in reports:
        (reports_dir / f"{rep.image_id}.json").write_text(rep.to_json(), encoding="utf-8")
        for r in rep.iterations:
            rows.append([rep.image_id, r.iteration, r.prompt_id, r.reward, r.feedback_score,
                         int(r.feedback_triggered), int(r.policy_updated)])
    _write_csv(out / "summary.csv",
               ["image", "iteration", "prompt_id", "reward", "feedback", "feedback_triggered", "policy_updated"],
               rows)
    _manifest(out, "run", config, settings, {k: settings.get(k) for k in ("prompts", "kb", "checkpoint", "images")})
    failed = [r.image_id for r in reports if not r.complete]
    for rep in reports:
        if rep.error:
            log.error("%s: %s", rep.image_id, rep.error)
    if failed:
        raise RunFailure(f"{len(failed)} image(s) incomplete: {', '.join(failed)}")
    log.info("wrote %d reports to %s", len(reports), reports_dir)
    return 0


def cmd_train(settings: dict) -> int:
    config = _run_config(settings)
    catalog = _catalog(settings)
    gateway = _gateway(settings)
    index = _index(settings, gateway)
    images = [p.read_bytes() for p in _images(settings)]
    params = opt = None
    if settings.get("checkpoint"):
        ckpt = load_checkpoint(settings["checkpoint"])
        params, opt = ckpt.params, ckpt.optimizer
    updates = int(settings.get("updates") or 50)
    params, opt, history = train(images, config, gateway, index, catalog, updates, params, opt)
    out = _out_dir(settings)
    save_checkpoint(out / "checkpoint.json", Checkpoint(params, opt, config.ppo, config.seed, {"config": config.to_dict()}))
    header = [f.name for f in fields(history[0])] if history else ["update"]
    _write_csv(out / "train_log.csv", header, [list(asdict(h).values()) for h in history])
    _manifest(out, "train", config, settings, {k: settings.get(k) for k in ("prompts", "kb", "checkpoint", "images")})
    return 0


def cmd_index(settings: dict) -> int:
    gateway = _gateway(settings)
    index = _index(settings, gateway)
    out = _out_dir(settings)
    save_index(out / "index.json", index)
    _manifest(out, "index", None, settings, {"kb": settings.get("kb")})
    return 0


def _paired(a: Path, b: Path, suffixes: set[str]) -> list[tuple[Path, Path]]:
    for d in (a, b):
        if not d.is_dir():
            raise UsageError(f"directory not found: {d}")
    left = {p.name: p for p in a.iterdir() if p.suffix.lower() in suffixes}
    right = {p.name: p for p in b.iterdir() if p.suffix.lower() in suffixes}
    orphans = sorted(set(left) ^ set(right))
    if orphans:
        listing = "\n".join(f"  {name} ({'only in ' + str(a if name in left else b)})" for name in orphans)
        raise RunFailure(f"unpaired inputs:\n{listing}")
    return [(left[n], right[n]) for n in sorted(left)]


def _fmt_psnr(value):
    return value if value == PSNR_INF else float(value)


def cmd_eval(settings: dict) -> int:
    out = _out_dir(settings)
    did = False
    if settings.get("originals") or settings.get("reconstructed"):
        pairs = _paired(_require(settings, "originals", "originals"), _require(settings, "reconstructed", "reconstructed"), IMAGE_SUFFIXES)
        rows, errs = [], []
        for orig, rec in pairs:
            try:
                a, b = read_pnm(orig), read_pnm(rec)
                err = mse(a, b)
                rows.append([orig.name, ssim(a, b), _fmt_psnr(psnr_from_mse(err)), err, NOT_APPLICABLE])
            except ValueError as exc:
                raise RunFailure(f"{orig.name}: {exc}") from exc
            errs.append(err)
        srra_value = NOT_APPLICABLE
        if settings.get("srra"):
            srra_value = _srra_from_file(Path(settings["srra"]))
        if rows:
            mean_mse = float(np.mean(errs))
            rows.append(["mean", float(np.mean([r[1] for r in rows])), _fmt_psnr(psnr_from_mse(mean_mse)), mean_mse, srra_value])
        _write_csv(out / "image_metrics.csv", ["image", "ssim", "psnr", "mse", "srra"], rows)
        did = True
    if settings.get("texts"):
        root = Path(settings["texts"])
        lex = load_lexicons(settings.get("lexicons"))
        if settings.get("baseline_texts"):
            pairs = _paired(root, Path(settings["baseline_texts"]), {".txt"})
            gateway = _gateway(settings)
        else:
            if not root.is_dir():
                raise UsageError(f"directory not found: {root}")
            pairs = [(p, None) for p in sorted(root.glob("*.txt"))]
            gateway = None
        rows = []
        for path, base in pairs:
            text = path.read_text(encoding="utf-8")
            st = text_stats(text, lex)
            sim = NOT_APPLICABLE
            if base is not None:
                sim = semantic_similarity(text, base.read_text(encoding="utf-8"), gateway.embed)
            rows.append([path.name, st.words, st.unique_words, st.detail_density, st.entities, st.modifiers, sim])
        _write_csv(out / "text_metrics.csv",
                   ["text", "words", "unique_words", "detail_density", "entities", "modifiers", "semantic_similarity"],
                   rows)
        did = True
    if not did:
        raise UsageError("eval needs --originals/--reconstructed and/or --texts")
    _manifest(out, "eval", None, settings,
              {k: settings.get(k) for k in ("originals", "reconstructed", "srra", "texts", "baseline_texts")})
    return 0


def _srra_from_file(path: Path) -> float:
    """``{"gallery": [{"identity", "vector"}], "probes": [{"identity", "vector"}]}``"""
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        gallery = [(g["identity"], np.array(g["vector"], dtype=float)) for g in doc["gallery"]]
        probes = [np.array(p["vector"], dtype=float) for p in doc["probes"]]
        truth = [p["identity"] for p in doc["probes"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"bad SRRA file {path}: {exc}") from exc
    return srra(probes, gallery, truth)


def cmd_report(settings: dict) -> int:
    root = _require(settings, "reports", "reports directory")
    if (root / "reports").is_dir():
        root = root / "reports"
    files = sorted(root.glob("*.json"))
    if not files:
        raise UsageError(f"no report files in {root}")
    reports = [PipelineReport.from_json(p.read_text(encoding="utf-8")) for p in files]
    out = _out_dir(settings)
    by_iter: dict[int, list] = {}
    quality = []
    for rep in reports:
        for r in rep.iterations:
            by_iter.setdefault(r.iteration, []).append(r)
        if rep.complete:
            m = rep.metrics
            quality.append([rep.image_id, m["initial"]["words"], m["final"]["words"], m["initial"]["unique_words"],
                            m["final"]["unique_words"], m["initial"]["detail_density"], m["final"]["detail_density"],
                            m["initial"]["entities"], m["final"]["entities"], m["initial"]["modifiers"],
                            m["final"]["modifiers"], m["semantic_similarity"]])
    rows = [[i, len(rs), float(np.mean([r.reward for r in rs])), float(np.mean([r.feedback_score for r in rs])),
             sum(r.feedback_triggered for r in rs), sum(r.policy_updated for r in rs),
             float(np.mean([r.catalog_size for r in rs]))]
            for i, rs in sorted(by_iter.items())]
    _write_csv(out / "iterations.csv",
               ["iteration", "images", "mean_reward", "mean_feedback", "feedback_triggered", "policy_updated",
                "mean_catalog_size"], rows)
    _write_csv(out / "text_quality.csv",
               ["image", "words_initial", "words_final", "unique_initial", "unique_final", "density_initial",
                "density_final", "entities_initial", "entities_final", "modifiers_initial", "modifiers_final",
                "semantic_similarity"], quality)
    seeds = sorted({r.seed for r in reports})
    _manifest(out, "report", None, {**settings, "seed": seeds[0] if len(seeds) == 1 else seeds}, {"reports": root})
    return 0


# -- parser --------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, help="refinement iterations per image (default 3)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lambda", type=float, help="feedback weight")
    p.add_argument("--clip-eps", dest="clip_eps", type=float)
    p.add_argument("--retention-k", dest="retention_k", type=int)
    p.add_argument("--trigger-margin", dest="trigger_margin", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlvlm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="refine captions for a directory of images")
    run.add_argument("--config")
    run.add_argument("--images")
    run.add_argument("--prompts")
    run.add_argument("--kb")
    run.add_argument("--checkpoint")
    run.add_argument("--fresh", action="store_true", default=None, help="use a freshly initialized policy")
    run.add_argument("--jobs", type=int)
    run.add_argument("--out")
    _add_run_flags(run)
    run.set_defaults(func=cmd_run)

    tr = sub.add_parser("train", help="train the prompt-selection policy")
    tr.add_argument("--config")
    tr.add_argument("--images")
    tr.add_argument("--prompts")
    tr.add_argument("--kb")
    tr.add_argument("--checkpoint", help="resume from this checkpoint")
    tr.add_argument("--updates", type=int)
    tr.add_argument("--out")
    _add_run_flags(tr)
    tr.set_defaults(func=cmd_train)

    ix = sub.add_parser("index", help="embed a knowledge base into a reusable index")
    ix.add_argument("--config")
    ix.add_argument("--kb")
    ix.add_argument("--out")
    ix.set_defaults(func=cmd_index)

    ev = sub.add_parser("eval", help="image privacy metrics and text quality metrics")
    ev.add_argument("--config")
    ev.add_argument("--originals")
    ev.add_argument("--reconstructed")
    ev.add_argument("--srra", help="JSON with gallery and probe embeddings")
    ev.add_argument("--texts")
    ev.add_argument("--baseline-texts", dest="baseline_texts")
    ev.add_argument("--lexicons")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="aggregate run reports into CSV tables")
    rp.add_argument("--config")
    rp.add_argument("--reports")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(_settings(args))
    except UsageError as exc:
        print(f"rlvlm {args.command}: {exc}", file=sys.stderr)
        return 2
    except RunFailure as exc:
        print(f"rlvlm {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"rlvlm {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
