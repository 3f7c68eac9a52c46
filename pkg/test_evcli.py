"""
End-to-end tests for the evcli subcommands, run in-process through main().
"""

import csv
import json
import tempfile
from pathlib import Path

import numpy as np

import datahub
from benchlab import ExperimentReport
from evcli import EXIT_FAILURE, EXIT_OK, EXIT_SINGULAR, main
from valuers import make_valuer, value_with_ev


def synth(directory: Path, *extra: str) -> Path:
    out = directory / "pair"
    code = main(["synth", "--output", str(out), "--n-id", "200", "--n-ood", "200", "--n-val", "50",
                 "--d", "6", "--threads", "1", *extra])
    assert code == EXIT_OK
    return out


def read_scores(path: Path):
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["score"]) for r in rows]), rows


# ============================================================================
# Failures
# ============================================================================

def test_missing_input_exits_without_output():
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "never"
        code = main(["value", "--input", str(Path(tmp) / "missing.evds"), "--output", str(out)])
        assert code == EXIT_FAILURE
        assert not out.exists()


def test_singular_covariance_exit_and_ridge_retry():
    with tempfile.TemporaryDirectory() as tmp:
        rng = np.random.default_rng(0)
        features = np.column_stack([rng.standard_normal((40, 2)), np.zeros(40)])
        path = datahub.save(datahub.EmbeddingDataset(features, rng.integers(0, 2, 40), 2), Path(tmp) / "flat.evds")

        out = Path(tmp) / "ev"
        code = main(["value", "--input", str(path), "--valuer", "ev", "--output", str(out)])
        assert code == EXIT_SINGULAR
        assert not out.exists()

        code = main(["value", "--input", str(path), "--valuer", "ev", "--ridge", "--output", str(out)])
        assert code == EXIT_OK
        scores, _ = read_scores(out / "values.csv")
        assert scores.shape == (40,) and np.all(np.isfinite(scores))


def test_bad_protocol_flags_fail_cleanly():
    with tempfile.TemporaryDirectory() as tmp:
        pair = synth(Path(tmp))
        out = Path(tmp) / "bad"
        code = main(["remove", "--train", str(pair / "id.evds"), "--ood", str(pair / "ood.evds"),
                     "--valuer", "random", "--fraction", "1.5", "--output", str(out)])
        assert code == EXIT_FAILURE
        assert not out.exists()


# ============================================================================
# Subcommands
# ============================================================================

def test_synth_writes_pair_and_report():
    with tempfile.TemporaryDirectory() as tmp:
        pair = synth(Path(tmp))
        id_set, ood_set, val_set = (datahub.load(pair / f"{name}.evds") for name in ("id", "ood", "val"))
        assert (id_set.n, ood_set.n, val_set.n) == (200, 200, 50)
        assert val_set.domain_tag == "val"
        report = ExperimentReport.load(pair / "synth.json")
        assert report.mean("population_diag_gap") <= 1e-10
        config = json.loads((pair / "config.json").read_text(encoding="utf-8"))
        assert config["command"] == "synth" and config["arguments"]["d"] == 6


def test_value_is_reproducible():
    with tempfile.TemporaryDirectory() as tmp:
        pair = synth(Path(tmp))
        blobs = []
        for name in ("a", "b"):
            out = Path(tmp) / name
            assert main(["value", "--input", str(pair / "id.evds"), "--valuer", "random",
                         "--seed", "3", "--output", str(out)]) == EXIT_OK
            blobs.append((out / "values.csv").read_bytes())
        assert blobs[0] == blobs[1]


def test_value_with_ev_matches_library_call():
    with tempfile.TemporaryDirectory() as tmp:
        pair = synth(Path(tmp))
        out = Path(tmp) / "knn"
        code = main(["value", "--input", str(pair / "id.evds"), "--val", str(pair / "val.evds"),
                     "--valuer", "knn-shapley", "--k", "10", "--w", "1", "--output", str(out)])
        assert code == EXIT_OK
        scores, rows = read_scores(out / "values.csv")
        train, val = datahub.load(pair / "id.evds"), datahub.load(pair / "val.evds")
        expected = value_with_ev(make_valuer("knn-shapley", k_neighbors=10), train, val, w=1.0, seed=0)
        assert np.array_equal(scores, expected.scores)
        assert rows[0]["method"] == "knn-shapley+ev" and float(rows[0]["w"]) == 1.0


def test_value_with_data_oob_lists_never_out_of_bag():
    with tempfile.TemporaryDirectory() as tmp:
        pair = synth(Path(tmp))
        out = Path(tmp) / "oob"
        code = main(["value", "--input", str(pair / "id.evds"), "--valuer", "data-oob",
                     "--num-models", "1", "--oob-epochs", "2", "--threads", "1", "--output", str(out)])
        assert code == EXIT_OK
        scores, _ = read_scores(out / "values.csv")
        never = json.loads((out / "never_oob.json").read_text(encoding="utf-8"))["never_oob"]
        assert len(never) > 0
        assert all(scores[i] == 0.0 for i in never)


def test_remove_on_unshifted_pair():
    with tempfile.TemporaryDirectory() as tmp:
        pair = synth(Path(tmp), "--shift", "0")
        out = Path(tmp) / "removal"
        code = main(["remove", "--train", str(pair / "id.evds"), "--ood", str(pair / "ood.evds"),
                     "--valuer", "random", "--seeds", "0", "1", "--epochs", "5", "--output", str(out)])
        assert code == EXIT_OK
        report = ExperimentReport.load(out / "removal.json")
        assert [r.seed for r in report.rows] == [0, 1]
        assert report.config["removal_fraction"] == 0.5
        assert (out / "removal.csv").is_file()


def test_stability_with_index_valuer():
    with tempfile.TemporaryDirectory() as tmp:
        pair = synth(Path(tmp))
        out = Path(tmp) / "stability"
        code = main(["stability", "--source", str(pair / "id.evds"), "--valuer", "index",
                     "--pool", "30", "--fixed", "27", "--repeats", "3", "--compare", "--output", str(out)])
        assert code == EXIT_OK
        report = ExperimentReport.load(out / "stability.json")
        assert report.values("mean_rank_std/index") == [0.0]


def test_align_runs():
    with tempfile.TemporaryDirectory() as tmp:
        pair = synth(Path(tmp))
        out = Path(tmp) / "align"
        code = main(["align", "--a", str(pair / "id.evds"), "--b", str(pair / "ood.evds"), "--output", str(out)])
        assert code == EXIT_OK
        report = ExperimentReport.load(out / "alignment.json")
        assert report.extras["domains"] == ["id", "ood"]


# ============================================================================
# Runner
# ============================================================================

def run_all_tests() -> bool:
    print("\n" + "=" * 80)
    print("EVCLI - TEST SUITE")
    print("=" * 80)

    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    results = []
    for name, fn in tests:
        try:
            fn()
            results.append((name, True, None))
        except Exception as e:
            results.append((name, False, f"{type(e).__name__}: {e}"))

    print(f"\n{'Test':<50} {'Result':<10}")
    print("-" * 80)
    for name, passed, error in results:
        print(f"{name:<50} {'PASS' if passed else 'FAIL':<10}")
        if error:
            print(f"  Error: {error}")

    passed = sum(1 for _, ok, _ in results if ok)
    print(f"\nTotal: {passed}/{len(results)} tests passed")
    return passed == len(results)


if __name__ == "__main__":
    exit(0 if run_all_tests() else 1)
