import pytest

from mitilab.gradcheck import all_checks, run_gradchecks


def test_every_check_passes_at_default_step():
    results = run_gradchecks()
    failed = [(r.name, r.max_rel_err) for r in results if not r.passed]
    assert not failed
    names = {r.name for r in results}
    assert {"matmul[a]", "softmax_rows", "layer_norm[x]", "attention_heads[q]"} <= names
    assert any(n.startswith("set_loss") for n in names)


def test_checks_are_deterministic():
    names = sorted(all_checks())[:6]
    a = run_gradchecks(names=names, seed=3)
    b = run_gradchecks(names=names, seed=3)
    assert [r.max_rel_err for r in a] == [r.max_rel_err for r in b]


def test_step_range_and_names_are_validated():
    with pytest.raises(ValueError, match="step"):
        run_gradchecks(step=1e-3)
    with pytest.raises(ValueError, match="step"):
        run_gradchecks(step=1e-9)
    with pytest.raises(ValueError, match="unknown"):
        run_gradchecks(names=["no_such_op"])
