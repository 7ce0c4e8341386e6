import numpy as np
import pytest

from _support import linear_collection
from platoonlab.data_engine import (
    ACCGains,
    DataLog,
    acc_control,
    add_excitation,
    load_log,
    record_sample,
    save_log,
    validate_log,
)


def test_acc_law_at_its_own_equilibrium_is_zero():
    g = ACCGains()
    v = 20.0
    assert acc_control(g.d_0 + g.t_gap * v, v, v, g) == pytest.approx(0.0, abs=1e-12)


def test_acc_law_saturates():
    assert acc_control(500.0, 0.0, 0.0) == 4.0
    assert acc_control(0.0, 40.0, 0.0) == -4.0


def test_acc_gains_validated():
    with pytest.raises(ValueError):
        ACCGains(k_gap=-1.0)


def test_excitation_is_stateless_and_bounded():
    a = [add_excitation(0.0, k, 0.1, 4.0, seed=7) for k in range(200)]
    b = [add_excitation(0.0, k, 0.1, 4.0, seed=7) for k in reversed(range(200))][::-1]
    assert a == b
    assert max(abs(v) for v in a) <= 0.1
    assert add_excitation(3.99, 0, 1.0, 4.0) <= 4.0
    assert a != [add_excitation(0.0, k, 0.1, 4.0, seed=8) for k in range(200)]


def test_record_sample_checks_dimensions():
    log = DataLog(n_x=3)
    record_sample(log, np.zeros(3), 0.0, np.ones(3))
    assert log.T == 1 and log.X1.shape == (3, 1)
    with pytest.raises(ValueError):
        record_sample(log, np.zeros(2), 0.0, np.zeros(3))


def test_rank_check_short_and_degenerate_logs():
    log = DataLog(n_x=3)
    for k in range(2):
        record_sample(log, np.full(3, k + 1.0), 0.0, np.zeros(3))
    assert validate_log(log) == (1, False)
    rng = np.random.default_rng(0)
    full = DataLog.from_matrices(rng.standard_normal((1, 10)), rng.standard_normal((3, 10)),
                                 rng.standard_normal((3, 10)))
    assert validate_log(full) == (3, True)


def test_collection_data_is_full_rank(collection):
    rank, ok = validate_log(collection)
    assert ok and rank == 15 and collection.T == 500


def test_csv_round_trip_preserves_digest(tmp_path):
    log, _, _ = linear_collection(T=40)
    files = save_log(log, tmp_path)
    assert set(files) == {"U0.csv", "X0.csv", "X1.csv", "meta.json"}
    again = load_log(tmp_path)
    assert again.digest() == log.digest()
    np.testing.assert_array_equal(again.X1, log.X1)


def test_load_log_reports_inconsistent_meta(tmp_path):
    log, _, _ = linear_collection(T=40)
    save_log(log, tmp_path)
    (tmp_path / "meta.json").write_text((tmp_path / "meta.json").read_text().replace('"T": 40', '"T": 41'))
    with pytest.raises(ValueError, match="T=41"):
        load_log(tmp_path)
