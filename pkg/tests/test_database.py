import pandas as pd
import pytest

from services import database
from services.database import (configure_database, finish_run, get_logs_from_database, get_runs,
                                get_step_metrics, log_to_database, save_step_metrics, start_run)


@pytest.fixture
def registry(tmp_path):
    previous = (database.db_manager.db_path, database.db_manager.enabled)
    yield configure_database(str(tmp_path / "registry" / "runs.db"))
    database.db_manager.db_path, database.db_manager.enabled = previous


def test_run_lifecycle(registry):
    assert registry.db_path.exists()
    first = start_run("generate", "abc", "runs/x")
    second = start_run("assimilate", "def", "runs/x")
    finish_run(first, "completed")

    runs = get_runs()
    assert [r['run_id'] for r in runs] == [second, first]
    assert runs[1]['status'] == "completed"
    assert runs[1]['finished_at'] is not None
    assert runs[0]['status'] == "running"
    assert [r['run_id'] for r in get_runs(command="generate")] == [first]
    assert len(get_runs(limit=1)) == 1


def test_step_metrics_roundtrip(registry):
    run_id = start_run("assimilate", "abc", "runs/x")
    metrics = pd.DataFrame({
        'step': [1, 1, 2],
        'group': ['observed', 'all', 'observed'],
        'skill': [0.5, 0.6, 0.4],
        'spread': [0.4, float('nan'), 0.3],
        'ess': [65.0, 65.0, 61.0],
        'alpha': [0.2, 0.2, 1.0],
        'clamp': ['', '', 'upper'],
    })
    save_step_metrics(run_id, metrics)

    stored = get_step_metrics(run_id)
    assert list(stored['group']) == ['observed', 'all', 'observed']
    assert stored['skill'].tolist() == [0.5, 0.6, 0.4]
    assert pd.isna(stored['spread'].iloc[1])
    assert get_step_metrics("other").empty


def test_logs_are_kept_per_run(registry):
    run_id = start_run("train", "abc", "runs/x")
    log_to_database(run_id, "started", "train started")
    log_to_database("other", "started", "other started", "WARNING")
    logs = get_logs_from_database(run_id)
    assert len(logs) == 1
    assert logs[0][1:] == ("started", "train started", "INFO")
    assert len(get_logs_from_database()) == 2


def test_disabled_registry_is_a_no_op(tmp_path):
    previous = (database.db_manager.db_path, database.db_manager.enabled)
    try:
        configure_database(str(tmp_path / "off.db"), enabled=False)
        run_id = start_run("plot", "abc", "runs/x")
        finish_run(run_id)
        assert run_id.startswith("plot-")
        assert get_runs() == []
        assert not (tmp_path / "off.db").exists()
    finally:
        database.db_manager.db_path, database.db_manager.enabled = previous
