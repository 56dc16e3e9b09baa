"""Unit tests for BLAS thread pinning."""

import os
import subprocess
import sys

from pathlib import Path
from typing import Dict

import pytest

from tadlet import threads
from tadlet.cli import main
from tadlet.threads import THREAD_ENV, pin_threads, wants_single_thread


class TestPinThreads:
    """Environment edits made before numpy loads."""

    @pytest.mark.parametrize("argv, environ, expected", [
        (["tadlet", "--deterministic", "train"], {}, True),
        (["tadlet", "train"], {"TAD_DETERMINISTIC": "1"}, True),
        (["tadlet", "train"], {"TAD_DETERMINISTIC": "0"}, False),
        (["tadlet", "train"], {}, False),
    ])
    def test_wants_single_thread(self, argv: list, environ: Dict[str, str], expected: bool) -> None:
        assert wants_single_thread(argv, environ) is expected

    def test_unset_variables_pinned(self) -> None:
        environ = {"MKL_NUM_THREADS": "4"}
        assert pin_threads(["tadlet", "--deterministic"], environ)
        assert environ == {"OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "4"}

    def test_nothing_pinned_by_default(self) -> None:
        environ: Dict[str, str] = {}
        assert not pin_threads(["tadlet"], environ)
        assert environ == {}

    def test_package_import_pins_threads(self) -> None:
        env = {k: v for k, v in os.environ.items() if k not in THREAD_ENV}
        env["TAD_DETERMINISTIC"] = "1"
        src = str(Path(__file__).resolve().parents[2] / "src")
        env["PYTHONPATH"] = os.pathsep.join(filter(None, [src, env.get("PYTHONPATH")]))
        script = ("import os, tadlet, tadlet.threads;"
                  "print(tadlet.threads.pinned_at_import, os.environ['OPENBLAS_NUM_THREADS'])")
        out = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.split() == ["True", "1"]

    def test_late_deterministic_config_warns(self, tiny_config_path: Path, tmp_path: Path,
                                             monkeypatch: pytest.MonkeyPatch,
                                             capsys: pytest.CaptureFixture[str]) -> None:
        monkeypatch.setattr(threads, "pinned_at_import", False)
        code = main(["--deterministic", "synth", "--spec", str(tiny_config_path), "--out", str(tmp_path / "out")])
        assert code == 0
        assert "BLAS thread pools were sized before" in capsys.readouterr().err
