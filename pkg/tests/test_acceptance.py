"""End-to-end acceptance checks.

The first run trains the desk-scale pipeline (about half an hour on one CPU);
later runs reuse the work directory named by ``LLAB_ACCEPT_DIR``.
"""

import csv
import json
from collections import defaultdict

import numpy as np
import pytest

from gradcheck import TOL, check_op, op_cases
from llab import experiments as ex
from llab.checkpoint import load_encoder, load_operator, load_reconstructor
from llab.config import load_config
from llab.images import load_split
from llab.linalg import eigvals_real
from llab.models import features_for, reconstruct
from llab.operators import (LatentOperator, TokenPairSet, apply_operator, fit_orthogonal,
                            operator_power, project_self_conjugate)
from llab.stats import paired_bootstrap, wilcoxon_signed_rank
from pipeline import default_workdir, run_pipeline

N_EVAL_MIN = 200


@pytest.fixture(scope="session")
def work():
    return run_pipeline(default_workdir())


def detail(request, text):
    request.node.user_properties.append(("detail", text))
    print(text)


def read_json(path):
    return json.loads(path.read_text())


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def random_orthogonal(c, rng):
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    return q * np.sign(np.diag(r))


@pytest.mark.criterion(1, "autodiff ops match finite differences")
def test_gradients(request):
    worst = defaultdict(float)
    shapes = defaultdict(int)
    for name, op, arrays, wrt in op_cases(seed=7, n_shapes=10):
        worst[name] = max(worst[name], check_op(op, arrays, wrt=wrt))
        shapes[name] += 1
    name = max(worst, key=worst.get)
    detail(request, f"{len(worst)} ops, min shapes {min(shapes.values())}, "
                    f"worst rel-err {worst[name]:.2e} ({name})")
    assert min(shapes.values()) >= 10
    assert worst[name] < TOL


@pytest.mark.criterion(2, "Procrustes recovers a planted orthogonal map")
def test_procrustes(request):
    errors = {}
    for c in (8, 32, 64):
        rng = np.random.default_rng(1000 + c)
        q0 = random_orthogonal(c, rng)
        x = rng.standard_normal((10 * c, c))
        clean = fit_orthogonal(TokenPairSet(x, x @ q0.T, normalized=False)).matrix
        noisy_y = x @ q0.T + 0.01 * rng.standard_normal(x.shape)
        noisy = fit_orthogonal(TokenPairSet(x, noisy_y, normalized=False)).matrix
        errors[c] = (np.linalg.norm(clean - q0), np.linalg.norm(noisy - q0))
    detail(request, ", ".join(f"c={c}: {a:.1e}/{b:.3f}" for c, (a, b) in errors.items()))
    assert all(a < 1e-8 and b < 0.1 for a, b in errors.values())


@pytest.mark.criterion(3, "self-conjugate projection contract")
def test_projection(request):
    worst = np.zeros(4)
    rng = np.random.default_rng(3)
    for c in (2, 8, 32, 64):
        for m in (rng.standard_normal((c, c)), random_orthogonal(c, rng)):
            o = project_self_conjugate(LatentOperator(m, "linear")).matrix
            again = project_self_conjugate(LatentOperator(o, "linear")).matrix
            eye = np.eye(c)
            errs = [np.linalg.norm(o - o.T), np.linalg.norm(o.T @ o - eye),
                    np.linalg.norm(o @ o - eye), np.linalg.norm(again - o)]
            worst = np.maximum(worst, errs)
    detail(request, "sym {:.1e}, orth {:.1e}, inv {:.1e}, idem {:.1e}".format(*worst))
    assert worst[0] < 1e-10 and worst[1] < 1e-10 and worst[2] < 1e-9 and worst[3] < 1e-9


def _match_error(found, expected):
    remaining = list(np.asarray(expected, complex))
    worst = 0.0
    for z in np.asarray(found, complex):
        k = int(np.argmin([abs(z - r) for r in remaining]))
        worst = max(worst, abs(z - remaining.pop(k)))
    return worst


@pytest.mark.criterion(4, "eigensolver oracles")
def test_eigensolver(request):
    rng = np.random.default_rng(4)
    companion_err = 0.0
    for degree in range(2, 9):
        n_pairs = degree // 3
        roots = [complex(rng.uniform(-2, 2), rng.uniform(0.3, 1.5)) for _ in range(n_pairs)]
        roots += [r.conjugate() for r in roots]
        roots += list(rng.uniform(-3, 3, degree - len(roots)))
        coeffs = np.poly(roots).real
        comp = np.zeros((degree, degree))
        comp[0] = -coeffs[1:]
        comp[1:, :-1] = np.eye(degree - 1)
        companion_err = max(companion_err, _match_error(eigvals_real(comp).eigenvalues, roots))

    structured_err = 0.0
    for c in (4, 10, 16):
        q = random_orthogonal(c, rng)
        signs = rng.choice([-1.0, 1.0], c)
        structured_err = max(structured_err,
                             _match_error(eigvals_real(q @ np.diag(signs) @ q.T).eigenvalues,
                                          signs))
        blocks = np.zeros((c, c))
        angles = rng.uniform(0.1, 3.0, c // 2)
        for k, t in enumerate(angles):
            blocks[2 * k:2 * k + 2, 2 * k:2 * k + 2] = [[np.cos(t), -np.sin(t)],
                                                         [np.sin(t), np.cos(t)]]
        expected = np.concatenate([np.exp(1j * angles), np.exp(-1j * angles)])
        structured_err = max(structured_err,
                             _match_error(eigvals_real(q @ blocks @ q.T).eigenvalues, expected))

    pairs_ok = True
    for n in range(1, 30):
        ev = eigvals_real(rng.standard_normal((n, n))).eigenvalues
        cplx = ev[ev.imag != 0]
        pairs_ok &= len(cplx) % 2 == 0 and all(
            cplx[k] == np.conj(cplx[k + 1]) for k in range(0, len(cplx), 2))
    detail(request, f"companion {companion_err:.1e}, rotation/involution {structured_err:.1e}, "
                    f"conjugate pairs {'ok' if pairs_ok else 'broken'}")
    assert companion_err < 1e-8 and structured_err < 1e-10 and pairs_ok


@pytest.mark.criterion(5, "suppression operator spectrum and power convergence")
def test_suppression_spectrum(request, work):
    report = read_json(work / "suppress_op" / "fit_report.json")
    check, gaps = report["spectrum_check"], report["power_gaps"]
    detail(request, f"max|λ| {check['max_abs']:.4f}, near 1: {check['n_near_one']}, "
                    f"‖A12-A24‖ {gaps['fro_A12_minus_A24']:.3g} vs "
                    f"‖A4-A8‖ {gaps['fro_A4_minus_A8']:.3g}")
    assert check["kind"] == "suppression" and report["pixel_op"].startswith("suppress")
    assert check["max_abs"] <= 1.05
    assert check["n_near_one"] >= 1
    assert gaps["fro_A12_minus_A24"] < gaps["fro_A4_minus_A8"]


def _eval_features(work, name):
    cfg = load_config(work / f"{name}.cfg")
    enc, _ = load_encoder(work / "masked" / "encoder.ckpt")
    images = load_split(ex.load_corpus(cfg), "eval", enc.resolution)
    return enc, images


@pytest.mark.criterion(6, "fitted swap operator is an involution with a real spectrum")
def test_swap_involution(request, work):
    op, _ = load_operator(work / "swap_op" / "operator.ckpt")
    enc, images = _eval_features(work, "swap")
    f = features_for(enc, images.pixels)
    twice = apply_operator(op, apply_operator(op, f, False), False)
    rel = np.linalg.norm(twice - f) / np.linalg.norm(f)
    spectrum = read_rows(work / "swap_op" / "spectrum.csv")
    max_imag = max(abs(float(r["im"])) for r in spectrum)
    detail(request, f"rel-err after two applications {rel:.1e}, max|Im λ| {max_imag:.2e}")
    assert rel < 1e-6 and max_imag < 0.05


@pytest.mark.criterion(7, "feature edit is nearly as good as re-encoding the edited image")
def test_edit_fidelity(request, work):
    s = read_json(work / "swap_edit_1" / "edit_summary.json")
    ratio = s["mean_mse_feature_edit"] / s["mean_mse_reencode"]
    detail(request, f"n={s['n_images']}, feature-edit MSE {s['mean_mse_feature_edit']:.5f}, "
                    f"re-encode MSE {s['mean_mse_reencode']:.5f}, ratio {ratio:.3f}")
    assert s["n_images"] >= N_EVAL_MIN and ratio <= 1.5


@pytest.mark.criterion(8, "reconstruction objective beats contrastive under the judge")
def test_objective_contrast(request, work):
    rows = read_rows(work / "compare" / "compare_table.csv")
    assert rows
    parts = []
    for row in rows:
        parts.append(f"{row['judge']}@{row['resolution']}: n={row['n']}, "
                     f"sim {float(row['mean_sim_a']):.4f} vs {float(row['mean_sim_b']):.4f}, "
                     f"wilcoxon {float(row['wilcoxon_p']):.2e}, "
                     f"bootstrap {float(row['bootstrap_p']):.2e}")
    detail(request, "; ".join(parts))
    for row in rows:
        assert int(row["n"]) >= N_EVAL_MIN
        assert float(row["mean_sim_a"]) > float(row["mean_sim_b"])
        assert float(row["wilcoxon_p"]) < 0.01 and float(row["bootstrap_p"]) < 0.01


@pytest.mark.criterion(9, "statistics oracles")
def test_statistics(request):
    five = wilcoxon_signed_rank([0.3, 0.1, 0.5, 0.2, 0.4]).p_value
    gaps = []
    for seed in range(5):
        d = np.random.default_rng(seed).normal(0.2, 1.0, 25)
        gaps.append(abs(wilcoxon_signed_rank(d, method="exact").p_value
                        - wilcoxon_signed_rank(d, method="approx").p_value))
    d = np.random.default_rng(9).normal(0.1, 0.3, 60)
    same = paired_bootstrap(d, B=10_000, seed=5).p_value == \
        paired_bootstrap(d, B=10_000, seed=5).p_value
    floor = paired_bootstrap(np.abs(d) + 1e-3, B=10_000, seed=5).p_value
    detail(request, f"n=5 p={five}, max exact/approx gap {max(gaps):.4f}, "
                    f"bootstrap deterministic {same}, all-positive p={floor:.3e}")
    assert five == 1 / 32 and max(gaps) < 0.01 and same and floor == 1 / 10_001


@pytest.mark.criterion(10, "colourisation edit beats the grayscale reconstruction")
def test_colorization(request, work):
    s = read_json(work / "colorize_edit_1" / "edit_summary.json")
    assert s["reverse"] and s["judges"]
    wins = {tag: j["win_fraction"] for tag, j in s["judges"].items()}
    detail(request, f"n={s['n_images']}, win fraction " +
           ", ".join(f"{t}: {w:.3f}" for t, w in wins.items()))
    assert all(w >= 0.6 for w in wins.values())


def _artifact_bytes(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())
            if p.name not in ("manifest.json", ex.LOCK_NAME)}


@pytest.mark.criterion(11, "reruns are byte-identical")
@pytest.mark.filterwarnings("ignore:.*config hash differs:UserWarning")
def test_reproducibility(request, work, tmp_path):
    enc = work / "masked" / "encoder.ckpt"
    rec = work / "masked_rec" / "reconstructor.ckpt"
    reruns = {
        "masked": lambda o: ex.cmd_train_encoder(load_config(work / "masked.cfg"), o),
        "suppress_op": lambda o: ex.cmd_fit_operator(load_config(work / "suppress.cfg"),
                                                     enc, o, rec),
        "swap_edit_1": lambda o: ex.cmd_edit_and_reconstruct(
            load_config(work / "swap.cfg"), enc, rec, work / "swap_op" / "operator.ckpt", o, 1),
        "compare": lambda o: ex.cmd_compare(load_config(work / "compare.cfg"), o),
    }
    mismatched = []
    for name, fn in reruns.items():
        fn(tmp_path / name)
        before, after = _artifact_bytes(work / name), _artifact_bytes(tmp_path / name)
        assert before.keys() == after.keys(), name
        mismatched += [f"{name}/{k}" for k in before if before[k] != after[k]]
        assert ex.verify_manifest(tmp_path / name) == []
    detail(request, f"{len(reruns)} commands rerun, mismatched files: {mismatched or 'none'}")
    assert not mismatched


def test_suppression_power_moves_towards_zeroed_blue(request, work):
    enc, images = _eval_features(work, "suppress")
    rec, _ = load_reconstructor(work / "masked_rec" / "reconstructor.ckpt")
    op, _ = load_operator(work / "suppress_op" / "operator.ckpt")
    zeroed = images.pixels.copy()
    zeroed[..., 2] = 0.0
    f = features_for(enc, images.pixels)
    mse = {n: float(np.mean((reconstruct(rec, apply_operator(operator_power(op, n), f))
                             - zeroed) ** 2)) for n in (4, 12)}
    detail(request, f"MSE to blue-zeroed: n=4 {mse[4]:.5f}, n=12 {mse[12]:.5f}")
    assert mse[12] < mse[4]
