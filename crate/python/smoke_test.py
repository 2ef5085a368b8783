"""Quick end-to-end check of the hyperweno_py extension."""

import math
import tempfile
from pathlib import Path

import hyperweno_py as hw


def main():
    assert hw.benchmarks() == ["burgers1", "burgers2", "shallow", "euler"]

    w = hw.classical_weights([0.0, 0.0, 0.0])
    assert all(abs(a - b) < 1e-12 for a, b in zip(w, [0.1, 0.6, 0.3])), w

    run = hw.rollout("burgers1", 64, 0.5, scheme="weno5", ic={"family": "sine", "a": 0.0, "b": 1.0})
    assert run.failure is None
    assert len(run.x) == 64 and len(run.last()) == 64
    assert math.isclose(run.times[-1], 0.5)
    assert max(abs(c) for c in run.conservation()) < 1e-12

    model = hw.Model(1, seed=3)
    learned = hw.rollout("burgers1", 64, 0.5, scheme=model)
    assert max(abs(c) for c in learned.conservation(relative=True)) < 1e-12
    assert model.target_param_count("burgers1", 64) == 78 * 64

    fine = [hw.rollout("burgers1", n, 0.5, ic={"family": "sine", "a": 0.0, "b": 1.0}, dt_ratio=0.05) for n in (32, 64, 128)]
    ref = hw.rollout("burgers1", 512, 0.5, ic={"family": "sine", "a": 0.0, "b": 1.0}, dt_ratio=0.05)
    refs = []
    for run_n in fine:
        k = 512 // len(run_n.x)
        last = ref.last()
        refs.append([[sum(last[i * k + j][0] for j in range(k)) / k] for i in range(len(run_n.x))])
    mse, orders = hw.mse_and_order([r.last() for r in fine], refs)
    assert mse[0] > mse[1] > mse[2], mse
    assert orders == hw.orders_from_mse(mse)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        hw.generate_dataset("burgers1", tmp / "data", n_traj=2, seed=1, mesh_levels=[32])
        trained, losses = hw.train("burgers1", tmp / "data", epochs=2, seed=1)
        assert len(losses) == 2 and all(math.isfinite(l) for l in losses)
        trained.save(tmp / "m.hwck")
        again = hw.Model.load(tmp / "m.hwck")
        assert again.n_params() == trained.n_params()
        hw.rollout("burgers1", 32, 0.2, scheme=again).save(tmp / "r.hwtrj")
        assert (tmp / "r.hwtrj").stat().st_size > 0

    try:
        hw.rollout("nonesuch", 32, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown benchmark accepted")

    print("smoke test ok:", model, run)


if __name__ == "__main__":
    main()
