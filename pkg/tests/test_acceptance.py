"""The eight acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import time
from dataclasses import replace

import numpy as np
import pytest

import test_metrics as metric_cases
import test_tracker as tracker_cases
from modt import cli
from modt.affinity import build_affinity, cross_attend, init_attention_weights, self_attend
from modt.benchmark import AblationProtocol, run_ablation
from modt.config import save, toy_config
from modt.encoder import TokenSet
from modt.gradcheck import TOLERANCE, run_gradcheck
from modt.metrics import Obs, averaged_mot, evaluate
from modt.numerics import Tensor
from modt.pipeline import batch_loss, init_params, train
from modt.scans import synth_scene, window_triplets
from modt.tracker import TrackerConfig, run

from oracles import attend_loop


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def test_1_gradient_fidelity(report):
    start = time.perf_counter()
    results = run_gradcheck(seeds=range(5))
    seconds = time.perf_counter() - start
    worst = max(r.worst for r in results)
    ok = all(r.ok for r in results) and seconds < 120
    report(1, "gradient fidelity", ok, f"worst rel err {worst:.2e} (< {TOLERANCE}) over 5 seeds, {seconds:.1f}s (< 120s)")


def test_2_attention_oracle(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for case in range(100):
        m = int(rng.integers(1, 9))
        channels = int(rng.integers(1, 17))
        a, b = rng.uniform(-1, 1, (m, m)), rng.uniform(-1, 1, (m, m))
        ws = init_attention_weights("att_self", rng, channels)
        wc = init_attention_weights("att_cross", rng, channels)
        got = self_attend(Tensor(a), ws).numpy()
        worst = max(worst, np.max(np.abs(got - np.array(attend_loop(a, a, ws, "att_self")))))
        out_t, out_tm1 = cross_attend(Tensor(a), Tensor(b), wc)
        worst = max(worst, np.max(np.abs(out_t.numpy() - np.array(attend_loop(b, a, wc, "att_cross")))))
        worst = max(worst, np.max(np.abs(out_tm1.numpy() - np.array(attend_loop(a, b, wc, "att_cross")))))
    report(2, "attention vs loop oracle", worst < 1e-12, f"max abs diff {worst:.1e} (< 1e-12) on 100 cases, M <= 8")


def test_3_affinity_bounds_and_symmetry(report):
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(100):
        ma, mb = rng.integers(1, 25, size=2)

        def tokens(m):
            scale = 10.0 ** rng.uniform(-3, 3)
            return TokenSet(Tensor(rng.normal(size=(m, 64)) * scale), rng.normal(size=(m, 3)) * 5, np.arange(m))

        ta, tb = tokens(ma), tokens(mb)
        ab, ba = build_affinity(ta, tb).numpy(), build_affinity(tb, ta).numpy()
        in_range = np.all(ab >= -1.0) and np.all(ab <= 1.0)
        violations += int(not (in_range and np.array_equal(ab, ba.T)))
    report(3, "affinity bounds and symmetry", violations == 0, f"{violations} violations in 100 random token pairs")


def test_4_oracle_perfect_tracking(report):
    seq = tracker_cases.crossing_scene()
    cfg = TrackerConfig()
    gap = tracker_cases.min_gap(seq)
    tracks = run(tracker_cases.oracle_frames(seq), cfg)
    pred = {}
    for trk in tracks:
        for f, box in trk.history:
            pred.setdefault(f, []).append(Obs(trk.id, tuple(box.center)))
    gt = {f.cloud.frame: [Obs(o.track_id, tuple(o.center)) for o in f.objects] for f in seq.frames}
    rep = evaluate(gt, pred, 1.0)
    ok = gap > cfg.r2 and len(seq.frames) == 20 and rep.mota == 1.0 and rep.ids == 0
    report(4, "oracle-perfect tracking", ok, f"MOTA {rep.mota}, IDS {rep.ids}, min spacing {gap:.2f} m > r2 {cfg.r2}")


def test_5_ablation_direction(report):
    res = run_ablation(AblationProtocol())
    base, self_, full = (res[m].mean_ids for m in ("none", "self", "full"))
    ok = base >= self_ >= full and base > full
    detail = f"mean IDS base {base:.1f} >= +self {self_:.1f} >= +self+cross {full:.1f} (10 noisy seeds)"
    report(5, "ablation direction", ok, detail)


HAND_CASES = [
    "test_identical_boxes_all_matched",
    "test_empty_predictions_all_fn",
    "test_far_prediction_is_fp",
    "test_perfect_tracking",
    "test_mota_point_eight",
    "test_single_id_switch",
    "test_fragmentation_and_mostly_lost",
    "test_motp_percentage",
    "test_continuity_keeps_previous_pair",
]


def test_6_metric_oracle(report):
    passed = 0
    for name in HAND_CASES:
        try:
            getattr(metric_cases, name)()
            passed += 1
        except AssertionError:
            pass
    gt = metric_cases.seq_of({0: [(1, 0.0), (2, 5.0), (3, 9.0)], 1: [(1, 0.2), (2, 5.1), (3, 9.3)]})
    pred = metric_cases.seq_of(
        {
            0: [(11, 0.1, 0.9), (12, 5.2, 0.6), (13, 20.0, 0.7)],
            1: [(11, 0.3, 0.8), (12, 5.0, 0.4), (14, 9.1, 0.3)],
        }
    )
    got = averaged_mot(gt, pred, 1.0)
    want = metric_cases.brute_averaged(gt, pred, 1.0)
    diff = max(abs(got.amota - want[0]), abs(got.samota - want[1]), abs(got.amotp - want[2]))
    ok = passed == len(HAND_CASES) and diff < 1e-12
    report(6, "metric oracle", ok, f"{passed}/{len(HAND_CASES)} hand cases, averaged_mot vs brute force diff {diff:.1e}")


def test_7_training_smoke(report):
    cfg = toy_config()
    triplets = window_triplets(synth_scene(cfg.scene, cfg.train.seed))
    start = time.perf_counter()
    runs = []
    for _ in range(2):
        params, _, hist = train(init_params(cfg), triplets, cfg, 50)
        final = batch_loss(triplets, params, cfg)[1].item()
        runs.append((hist[0]["total"], final, [h["total"] for h in hist]))
    seconds = time.perf_counter() - start
    initial, final, _ = runs[0]
    ok = final < 0.5 * initial and runs[0] == runs[1] and seconds < 300
    report(7, "training smoke", ok, f"loss {initial:.3f} -> {final:.3f} ({final / initial:.1%} < 50%), deterministic, {seconds:.1f}s for 2 runs")


def test_8_track_determinism(report, tmp_path):
    cfg = toy_config()
    save(tmp_path / "run.ini", cfg)
    assert cli.main(["synth", "--config", str(tmp_path / "run.ini"), "--out", str(tmp_path / "d")]) == 0
    assert cli.main(["train", "--config", str(tmp_path / "run.ini"), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "ck")]) == 0
    outs = []
    for name in ("a.txt", "b.txt"):
        assert cli.main(["track", "--checkpoint", str(tmp_path / "ck"), "--scans", str(tmp_path / "d"),
                         "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    report(8, "cmd_track determinism", ok, f"two runs, {len(outs[0])} bytes each, identical={outs[0] == outs[1]}")
