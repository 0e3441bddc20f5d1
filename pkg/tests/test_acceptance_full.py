"""Full-scale pipeline on the default configuration (160 train / 40 test speakers).

Slow: run with ``pytest -m slow``.
"""
import pytest
from attrsv import pipeline
from attrsv.config import load_config

pytestmark = pytest.mark.slow

ROUTES = ["ac", "xvector", "ecapa"]
KINDS = ["linreg", "logreg", "forest", "nn"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    config = load_config(None, work_dir=tmp_path_factory.mktemp("full") / "work")
    store = pipeline.open_store(config)
    pipeline.synth(config, store)
    pipeline.extract(config, store)
    stage1 = pipeline.train_attr(config, store)
    pipeline.make_trials(config, store)
    pipeline.train_sv(config, store)
    return stage1, pipeline.evaluate(config, store)


def test_ac_classifiers_reach_target_accuracy(run):
    stage1, _ = run
    ac = {r.attribute: r.test_accuracy for r in stage1 if r.route == "ac"}
    assert set(ac) == {"gender", "nationality", "age", "profession"}
    for attribute, acc in ac.items():
        assert acc >= 0.9, f"{attribute}: {acc:.3f}"


@pytest.mark.parametrize("kind", KINDS)
def test_attribute_eer_sits_between_baselines(run, kind):
    _, report = run
    truth = report.eer("groundtruth", "hard", kind)
    chance = report.eer("random", "hard", kind)
    assert truth < chance
    for mode in ("softmax", "hard"):
        assert truth <= report.eer("ac", mode, kind) <= chance


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("route", ROUTES)
def test_softmax_no_worse_than_hard(run, route, kind):
    _, report = run
    assert report.eer(route, "softmax", kind) <= report.eer(route, "hard", kind) + 0.01


@pytest.mark.parametrize("kind", KINDS)
def test_softmax_narrows_route_spread(run, kind):
    _, report = run

    def spread(mode):
        eers = [report.eer(route, mode, kind) for route in ROUTES]
        return max(eers) - min(eers)

    assert spread("softmax") <= spread("hard")
