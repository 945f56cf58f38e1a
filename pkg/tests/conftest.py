import sys
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[n] = line
        print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])


# ------------------------------------------------------------ shared state
@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default synthetic dataset (D = 400 pairs, m = 5), built once."""
    from hoiplaus import dataset as DS

    out = tmp_path_factory.mktemp("default_dataset")
    t = time.perf_counter()
    with threadpool_limits(1):
        manifest = DS.build_dataset(DS.GenConfig(), 0, out)
    return {"dir": out, "manifest": manifest, "records": DS.read_labels(out), "seconds": time.perf_counter() - t}


@pytest.fixture(scope="session")
def trained_nets(default_dataset):
    """Both networks with the combined loss and the hard-only ablation arm, timed together."""
    from hoiplaus import dataset as DS
    from hoiplaus import surrogate as S

    recs = default_dataset["records"]
    nets, scores = {}, {}
    t = time.perf_counter()
    with threadpool_limits(1):
        for kind, make in (("grasp", S.new_grasp_net), ("manip", S.new_manip_net)):
            sets = DS.training_sets(recs, kind)
            for arm, soft in (("combined", 1.0), ("hard_only", 0.0)):
                res = S.train(make(0), sets["train"], S.TrainConfig(alpha_soft=soft), sets["val"], sets["test"])
                nets[kind, arm] = res.net
                scores[kind, arm] = res.f_score
    return {"nets": nets, "f": scores, "seconds": time.perf_counter() - t}


def _load_eval_sequences(default_dataset):
    from hoiplaus import dataset as DS

    seq_dir = default_dataset["dir"] / "sequences"
    out = []
    for key in default_dataset["manifest"]["sequences"]:
        noisy = DS.read_sequence(seq_dir / f"{key}.noisy.seq.jsonl")
        clean = DS.read_sequence(seq_dir / f"{key}.clean.seq.jsonl")
        out.append((noisy, clean, DS.resolve_object(noisy.object_ref)))
    return out


@pytest.fixture(scope="session")
def refinement_arms(default_dataset, trained_nets):
    """Noisy metrics plus refined metrics for the combined, grasp-only and manip-only arms."""
    from hoiplaus import metrics as M
    from hoiplaus import refine as R

    seqs = _load_eval_sequences(default_dataset)
    nets = (trained_nets["nets"]["grasp", "combined"], trained_nets["nets"]["manip", "combined"])
    arms = {
        "combined": R.RefineConfig(),
        "grasp_only": R.RefineConfig(alpha_manip=0.0),
        "manip_only": R.RefineConfig(alpha_grasp=0.0),
    }
    out = {"n_sequences": len(seqs)}
    with threadpool_limits(1):
        out["noisy"] = [f for noisy, clean, obj in seqs
                        for f in M.evaluate_sequence(noisy.poses, clean.poses, obj, noisy.trajectory(),
                                                     compute_iv=False)]
        for arm, cfg in arms.items():
            t = time.perf_counter()
            frames = []
            for noisy, clean, obj in seqs:
                res = R.refine_sequence(noisy.poses, noisy.trajectory(), obj, nets, cfg)
                frames += M.evaluate_sequence(res.poses, clean.poses, obj, noisy.trajectory(), compute_iv=False)
            out[arm] = frames
            out[arm + "_seconds"] = time.perf_counter() - t
    return out


def mean_of(frames, key):
    return float(np.mean([getattr(f, key) for f in frames]))
