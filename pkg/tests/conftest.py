import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


import pytest  # noqa: E402

from diffbci import cli  # noqa: E402


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Default dataset, a trained desk model and a 20-trial held-out set, built once via the CLI."""
    d = tmp_path_factory.mktemp("pipeline")
    paths = {"data": d / "train.bcie", "model": d / "model.bcim", "heldout": d / "heldout.bcie"}
    assert cli.main(["synth", "--out", str(paths["data"])]) == 0
    assert cli.main(["train", "--data", str(paths["data"]), "--out-model", str(paths["model"])]) == 0
    assert cli.main(["synth", "--out", str(paths["heldout"]), "--trials-per-class", "5", "--seed", "43"]) == 0
    return paths


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[cid])
