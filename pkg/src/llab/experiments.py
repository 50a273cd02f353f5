"""
Experiment commands: each writes checkpoints, CSV/JSON reports and PNG grids
into one output directory, then a ``manifest.json`` hashing every artifact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .checkpoint import (load_encoder, load_operator, load_reconstructor, save_encoder,
                         save_operator, save_reconstructor)
from .config import ExperimentConfig
from .errors import ConfigError, DataError, DegenerateInput, LabError
from .images import (Corpus, ImageSet, PixelOperator, apply_pixel_op, list_images, load_image,
                     load_split, save_png, split_corpus, write_synthetic_corpus)
from .models import (channel_activation_maps, encode, features_for, pretrain_encoder, reconstruct,
                     train_reconstructor)
from .operators import (apply_operator, build_token_pairs, eig_spectrum, fit_linear,
                        fit_orthogonal, operator_power, project_self_conjugate, spectrum_check)
from .stats import compare_encoders, judge_scores, write_similarity_csv

log = logging.getLogger(__name__)

LOCK_NAME = ".llab.lock"
MANIFEST_NAME = "manifest.json"
EDIT_NOTE = ("feature-edit fidelity is operationalised as mean MSE(R(Q^n f), A^n(i)) divided by "
             "mean MSE(R(E(A^n(i))), A^n(i)); values near 1 mean the feature edit is as good as "
             "re-encoding the pixel-edited image")


# output directory plumbing


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _artifacts(out: Path) -> dict[str, str]:
    skip = {LOCK_NAME, MANIFEST_NAME}
    return {p.relative_to(out).as_posix(): sha256_file(p)
            for p in sorted(out.rglob("*")) if p.is_file() and p.name not in skip}


@contextmanager
def run_dir(out, command: str, cfg: ExperimentConfig | None, inputs: dict | None = None):
    """Lock ``out`` for one command and write its manifest when the body succeeds."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise LabError(f"output directory {out} is in use by another command") from None
    start = time.time()
    try:
        yield out
        manifest = {
            "command": command,
            "config": cfg.to_text() if cfg else None,
            "config_hash": cfg.digest() if cfg else None,
            "seeds": {"global": cfg.seed, "corpus": cfg.data.seed} if cfg else {},
            "wall_clock_seconds": round(time.time() - start, 3),
            "inputs": {k: sha256_file(v) for k, v in (inputs or {}).items() if v},
            "artifacts": _artifacts(out),
        }
        write_json(out / MANIFEST_NAME, manifest)
    finally:
        lock.release()


def verify_manifest(out) -> list[str]:
    """Problems found when re-hashing an output directory (empty list means it verifies)."""
    out = Path(out)
    path = out / MANIFEST_NAME
    if not path.is_file():
        return [f"{path} missing"]
    listed = json.loads(path.read_text())["artifacts"]
    actual = _artifacts(out)
    problems = [f"{k}: hash mismatch" for k in listed if k in actual and actual[k] != listed[k]]
    problems += [f"{k}: missing" for k in listed if k not in actual]
    problems += [f"{k}: not listed" for k in actual if k not in listed]
    return problems


def make_grid(rows, sep: int = 2) -> np.ndarray:
    """Tile equally sized images into rows with ``sep``-pixel white gaps."""
    h, w = rows[0][0].shape[:2]
    n_cols = max(len(r) for r in rows)
    grid = np.ones((len(rows) * h + (len(rows) - 1) * sep, n_cols * w + (n_cols - 1) * sep, 3))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            if img.shape[:2] != (h, w):
                raise ValueError("grid images must share one size")
            y, x = i * (h + sep), j * (w + sep)
            grid[y:y + h, x:x + w] = np.clip(img, 0.0, 1.0)
    return grid


# data access


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    """Split the corpus (or read an explicit split file) and refuse overlapping splits."""
    d = cfg.data
    if d.split_file:
        path = Path(d.split_file)
        if not path.is_file():
            raise DataError(f"split file {path} not found")
        raw = json.loads(path.read_text())
        root = Path(d.root)
        corpus = Corpus({k: sorted(str(root / f) for f in v) for k, v in raw.items()}, d.seed)
    else:
        corpus = split_corpus(list_images(d.root), d.seed, d.fractions)
    corpus.assert_disjoint()
    return corpus


def _limit(n: int) -> int | None:
    return n if n > 0 else None


# commands


def cmd_make_corpus(out, n: int, size: int = 32, seed: int = 0) -> Path:
    with run_dir(out, "make-corpus", None) as d:
        write_synthetic_corpus(d, n, size, seed)
    return Path(out)


def cmd_train_encoder(cfg: ExperimentConfig, out) -> Path:
    tc = cfg.encoder_train_config()
    e = cfg.encoder
    with run_dir(out, "train-encoder", cfg) as d:
        images = load_split(load_corpus(cfg), "encoder-pretrain", cfg.data.resolution,
                            _limit(e.limit))
        enc, curve = pretrain_encoder(tc, images, cfg.data.resolution, e.patch_size, e.dim,
                                      e.depth, e.heads)
        path = save_encoder(d / "encoder.ckpt", enc, config_hash=cfg.digest(),
                            corpus_seed=cfg.data.seed, seed=cfg.seed, train=asdict(tc),
                            n_images=len(images))
        write_csv(d / "loss_curve.csv", ["epoch", "loss"],
                  [(i + 1, v) for i, v in enumerate(curve)])
    return path


def cmd_train_reconstructor(cfg: ExperimentConfig, encoder_ckpt, out) -> Path:
    enc, _ = load_encoder(encoder_ckpt, cfg.digest())
    tc = cfg.reconstructor_train_config()
    r = cfg.reconstructor
    with run_dir(out, "train-reconstructor", cfg, {"encoder": encoder_ckpt}) as d:
        images = load_split(load_corpus(cfg), "reconstructor-train", enc.resolution,
                            _limit(r.limit))
        n_val = int(round(cfg.data.val_fraction * len(images)))
        if len(images) - n_val < 1:
            raise DataError("reconstructor-train split too small after the validation hold-out")
        train = ImageSet(images.split, images.ids[:len(images) - n_val],
                         images.pixels[:len(images) - n_val])
        val = (ImageSet(images.split, images.ids[len(images) - n_val:],
                        images.pixels[len(images) - n_val:]) if n_val else None)
        rec, hist = train_reconstructor(enc, tc, train, val, r.depth, r.heads, r.min_channels)
        path = save_reconstructor(d / "reconstructor.ckpt", rec, enc.param_hash(),
                                  config_hash=cfg.digest(), corpus_seed=cfg.data.seed,
                                  seed=cfg.seed, train=asdict(tc),
                                  encoder_objective=enc.objective)
        vals = hist["val_mse"] or [None] * len(hist["train_loss"])
        write_csv(d / "val_curve.csv", ["epoch", "train_loss", "val_mse"],
                  [(i + 1, t, "" if v is None else v)
                   for i, (t, v) in enumerate(zip(hist["train_loss"], vals))])
    return path


def _spectrum_kind(pixel_op: PixelOperator) -> str | None:
    return {"swap_rb": "swap", "suppress": "suppression"}.get(pixel_op.kind)


def _power_gaps(m: np.ndarray) -> dict:
    p = {k: np.linalg.matrix_power(m, k) for k in (4, 8, 12, 24)}
    return {"fro_A4_minus_A8": float(np.linalg.norm(p[4] - p[8])),
            "fro_A12_minus_A24": float(np.linalg.norm(p[12] - p[24]))}


def cmd_fit_operator(cfg: ExperimentConfig, encoder_ckpt, out, reconstructor_ckpt=None) -> Path:
    o = cfg.operator
    pixel_op = o.pixel_operator()
    enc, _ = load_encoder(encoder_ckpt, cfg.digest())
    inputs = {"encoder": encoder_ckpt, "reconstructor": reconstructor_ckpt}
    with run_dir(out, "fit-operator", cfg, inputs) as d:
        corpus = load_corpus(cfg)
        images = load_split(corpus, "operator-fit", enc.resolution, _limit(o.n_images))
        pairs = build_token_pairs(enc, pixel_op, images, o.normalized, o.reverse)
        if o.kind == "linear":
            op = fit_linear(pairs, o.ridge)
        else:
            op = fit_orthogonal(pairs)
            if o.kind == "orthogonal-self-conjugate":
                op = project_self_conjugate(op, pairs)
        spectrum = eig_spectrum(op)
        check_kind = _spectrum_kind(pixel_op)
        report = {
            "operator_kind": op.kind, "pixel_op": pixel_op.tag(), "reverse": o.reverse,
            "n_images": len(images), "n_pairs": pairs.n, "dim": op.c, "residual": op.residual,
            "relative_residual": op.residual / float(np.linalg.norm(pairs.Y)),
            "invariant_errors": op.invariant_errors(), "operator_hash": op.digest(),
            "encoder_hash": enc.param_hash(), "eig_iterations": spectrum.iterations,
            "eig_converged": spectrum.converged,
            "spectrum_check": spectrum_check(spectrum, check_kind, o.spectrum_tol) if check_kind else None,
            "power_gaps": _power_gaps(op.matrix),
        }
        path = save_operator(d / "operator.ckpt", op, encoder_hash=enc.param_hash(),
                             config_hash=cfg.digest(), corpus_seed=cfg.data.seed,
                             pixel_op={"kind": pixel_op.kind, "channel": pixel_op.channel,
                                       "alpha": pixel_op.alpha},
                             reverse=o.reverse, renormalize=o.renormalize)
        write_csv(d / "spectrum.csv", ["index", "re", "im", "abs"],
                  [(i, float(z.real), float(z.imag), float(abs(z)))
                   for i, z in enumerate(spectrum.eigenvalues)])
        write_json(d / "fit_report.json", report)
        if reconstructor_ckpt:
            rec, _ = load_reconstructor(reconstructor_ckpt)
            preview = load_split(corpus, "eval", enc.resolution, cfg.edit.grid_rows)
            result = edit_images(enc, rec, op, pixel_op, o.reverse, preview.pixels, 1,
                                 o.renormalize)
            save_png(d / "preview_grid.png", make_grid(result["grid_rows"]))
    return path


def _check_consistent(enc, rec, rec_manifest, op=None) -> None:
    if (rec.grid, rec.dim, rec.patch_size) != (enc.grid, enc.dim, enc.patch_size):
        raise DataError(f"reconstructor expects grid {rec.grid}, dim {rec.dim}, patch "
                        f"{rec.patch_size}; encoder gives {enc.grid}, {enc.dim}, {enc.patch_size}")
    if op is not None and op.c != enc.dim:
        raise DataError(f"operator dimension {op.c} does not match encoder dimension {enc.dim}")
    if rec_manifest.get("encoder_hash") not in (None, enc.param_hash()):
        warnings.warn("reconstructor was trained on a different encoder checkpoint")


def _mse_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.mean((a - b) ** 2, axis=(1, 2, 3))


def edit_images(enc, rec, op, pixel_op: PixelOperator, reverse: bool, pixels: np.ndarray,
                power: int, renormalize: bool) -> dict:
    """Run the five-column edit comparison on a batch.

    Forward operators map an image ``i`` to ``A^n(i)``; reversed ones (colourisation)
    start from ``A(i)`` and aim at ``i``.
    """
    if reverse:
        source, target = apply_pixel_op(pixel_op, pixels), pixels
    else:
        source, target = pixels, pixels
        for _ in range(power):
            target = apply_pixel_op(pixel_op, target)
    feats = features_for(enc, source)
    plain = reconstruct(rec, feats)
    target_recon = reconstruct(rec, features_for(enc, target))
    edited = reconstruct(rec, apply_operator(operator_power(op, power), feats, renormalize))
    return {
        "source": source, "target": target, "plain": plain, "target_recon": target_recon,
        "edited": edited,
        "mse_feature_edit": _mse_rows(edited, target),
        "mse_reencode": _mse_rows(target_recon, target),
        "mse_between": _mse_rows(edited, target_recon),
        "mse_plain": _mse_rows(plain, target),
        "grid_rows": [[s, p, t, tr, e] for s, p, t, tr, e in
                      zip(source, plain, target, target_recon, edited)],
    }


def _load_judges(paths) -> list[tuple[str, object]]:
    judges = []
    for p in paths:
        judge, _ = load_encoder(p)
        judges.append((Path(p).parent.name + "/" + Path(p).stem, judge))
    return judges


def cmd_edit_and_reconstruct(cfg: ExperimentConfig, encoder_ckpt, reconstructor_ckpt,
                             operator_ckpt, out, power: int | None = None) -> Path:
    power = power or cfg.edit.power
    enc, _ = load_encoder(encoder_ckpt)
    rec, rec_manifest = load_reconstructor(reconstructor_ckpt)
    op, op_manifest = load_operator(operator_ckpt)
    _check_consistent(enc, rec, rec_manifest, op)
    pixel_op = PixelOperator(**op_manifest["pixel_op"])
    reverse = bool(op_manifest.get("reverse", False))
    renormalize = bool(op_manifest.get("renormalize", cfg.operator.renormalize))
    judges = _load_judges(cfg.judge.checkpoints)
    inputs = {"encoder": encoder_ckpt, "reconstructor": reconstructor_ckpt,
              "operator": operator_ckpt}
    inputs.update({f"judge:{t}": p for (t, _), p in zip(judges, cfg.judge.checkpoints)})
    with run_dir(out, "edit", cfg, inputs) as d:
        images = load_split(load_corpus(cfg), "eval", enc.resolution, _limit(cfg.edit.n_images))
        res = edit_images(enc, rec, op, pixel_op, reverse, images.pixels, power, renormalize)
        header = ["image_id", "mse_feature_edit", "mse_reencode", "mse_between", "mse_plain"]
        cols = [res[k] for k in header[1:]]
        judge_summary = {}
        for tag, judge in judges:
            sim_edit = judge_scores(judge, res["target"], res["edited"])
            sim_plain = judge_scores(judge, res["target"], res["plain"])
            header += [f"sim_edit[{tag}]", f"sim_plain[{tag}]"]
            cols += [sim_edit, sim_plain]
            judge_summary[tag] = {"mean_sim_edit": float(sim_edit.mean()),
                                  "mean_sim_plain": float(sim_plain.mean()),
                                  "win_fraction": float(np.mean(sim_edit > sim_plain))}
        write_csv(d / "edit_metrics.csv", header,
                  [(iid, *(float(c[k]) for c in cols)) for k, iid in enumerate(images.ids)])
        mean_edit = float(res["mse_feature_edit"].mean())
        mean_re = float(res["mse_reencode"].mean())
        summary = {
            "n_images": len(images), "power": power, "pixel_op": pixel_op.tag(),
            "reverse": reverse, "operator_kind": op.kind, "renormalize": renormalize,
            "mean_mse_feature_edit": mean_edit, "mean_mse_reencode": mean_re,
            "mean_mse_between": float(res["mse_between"].mean()),
            "mean_mse_plain": float(res["mse_plain"].mean()),
            "mse_ratio_feature_vs_reencode": mean_edit / mean_re if mean_re > 0 else None,
            "judges": judge_summary, "note": EDIT_NOTE,
        }
        write_json(d / "edit_summary.json", summary)
        save_png(d / "edit_grid.png", make_grid(res["grid_rows"][:cfg.edit.grid_rows]))
    return Path(out)


def cmd_compare(cfg: ExperimentConfig, out) -> Path:
    """Paired comparison of pipelines A and B, one row per resolution and judge.

    When every paired difference is zero the report is still written, marked
    degenerate, and :class:`DegenerateInput` is raised afterwards.
    """
    c = cfg.compare
    lists = [c.encoder_a, c.reconstructor_a, c.encoder_b, c.reconstructor_b]
    if not c.encoder_a or len({len(x) for x in lists}) != 1:
        raise ConfigError("compare needs equally long encoder/reconstructor lists for A and B")
    if not cfg.judge.checkpoints:
        raise ConfigError("compare needs at least one judge checkpoint")
    judges = _load_judges(cfg.judge.checkpoints)
    inputs = {f"{k}[{i}]": p for k, v in zip(("encoder_a", "reconstructor_a", "encoder_b",
                                                "reconstructor_b"), lists)
              for i, p in enumerate(v)}
    degenerate = False
    with run_dir(out, "compare", cfg, inputs) as d:
        corpus = load_corpus(cfg)
        table, details = [], []
        for ea, ra, eb, rb in zip(*lists):
            enc_a, _ = load_encoder(ea)
            rec_a, man_a = load_reconstructor(ra)
            enc_b, _ = load_encoder(eb)
            rec_b, man_b = load_reconstructor(rb)
            _check_consistent(enc_a, rec_a, man_a)
            _check_consistent(enc_b, rec_b, man_b)
            if enc_a.resolution != enc_b.resolution:
                raise ConfigError("pipelines A and B must share an input resolution")
            res = enc_a.resolution
            images = load_split(corpus, "eval", res, _limit(c.n_images))
            for tag, judge in judges:
                comp = compare_encoders(enc_a, rec_a, enc_b, rec_b, judge, images, tag,
                                        c.bootstrap_b, cfg.seed)
                degenerate |= comp.degenerate
                safe = tag.replace("/", "_")
                write_similarity_csv(d / f"similarity_{res}_{safe}.csv", comp)
                s = comp.summary()
                table.append((res, tag, s["n"], s["mean_sim_a"], s["mean_sim_b"],
                              comp.wilcoxon.p_value if comp.wilcoxon else "",
                              comp.bootstrap.p_value if comp.bootstrap else "",
                              str(comp.degenerate).lower()))
                details.append({"resolution": res, "encoder_a": enc_a.objective,
                                "encoder_b": enc_b.objective, **s})
        write_csv(d / "compare_table.csv",
                  ["resolution", "judge", "n", "mean_sim_a", "mean_sim_b", "wilcoxon_p",
                   "bootstrap_p", "degenerate"], table)
        write_json(d / "compare.json", {"alternative": "A reconstructs better than B",
                                        "rows": details, "degenerate": degenerate})
    if degenerate:
        raise DegenerateInput("pipelines A and B produced identical judge scores")
    return Path(out)


def cmd_channel_maps(encoder_ckpt, image_path, out, channels=(0, 1, 2, 3),
                     cfg: ExperimentConfig | None = None) -> Path:
    enc, _ = load_encoder(encoder_ckpt)
    channels = list(channels)
    if not channels:
        raise ConfigError("channel list is empty")
    bad = [ch for ch in channels if not 0 <= ch < enc.dim]
    if bad:
        raise ConfigError(f"channels {bad} out of range for {enc.dim} channels")
    with run_dir(out, "channel-maps", cfg, {"encoder": encoder_ckpt, "image": image_path}) as d:
        img = load_image(image_path, enc.resolution)
        maps = channel_activation_maps(encode(enc, img), channels)
        scale = enc.patch_size
        tiles = [img] + [np.repeat(np.repeat(m, scale, 0), scale, 1)[..., None].repeat(3, -1)
                         for m in maps]
        save_png(d / "channel_maps.png", make_grid([tiles]))
    return Path(out) / "channel_maps.png"
