"""Unit tests for the command line surface."""

import json

from pathlib import Path

import pytest

from tadlet import __version__
from tadlet.cli import build_parser, main
from tadlet.data import AnnotationFile, VideoAnnotation, save_annotations
from tadlet.inference import write_detections
from tadlet.segments import Detection, LabeledSegment, Segment


class TestParser:
    """Arguments and defaults."""

    def test_command_required(self) -> None:
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_version(self, capsys: pytest.CaptureFixture[str]) -> None:
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args(["--version"])
        assert info.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_eval_defaults(self) -> None:
        args = build_parser().parse_args(["eval", "--detections", "d.json", "--annotations", "a.json", "--out", "r.csv"])
        assert args.thresholds == [0.3, 0.4, 0.5, 0.6, 0.7]
        assert args.command == "eval"

    def test_infer_split_choices(self) -> None:
        with pytest.raises(SystemExit):
            build_parser().parse_args(["infer", "--config", "c", "--checkpoint", "w", "--data", "d",
                                       "--split", "val", "--out", "o"])


class TestCommands:
    """Commands that finish in well under a second on the tiny configuration."""

    def test_synth(self, tiny_config_path: Path, tmp_path: Path) -> None:
        out = tmp_path / "data"
        assert main(["-q", "synth", "--spec", str(tiny_config_path), "--out", str(out)]) == 0
        train = json.loads((out / "annotations_train.json").read_text())
        assert len(train["videos"]) == 3
        assert len(list((out / "features").glob("*.tadf"))) == 5

    def test_eval(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        annotations = AnnotationFile(
            (VideoAnnotation("v", 300, 30.0, (LabeledSegment(Segment(30.0, 90.0), 0),)),), num_classes=1)
        save_annotations(tmp_path / "ann.json", annotations)
        write_detections(tmp_path / "dets.json", {"v": [Detection(Segment(30.0, 90.0), 0.9, 0)]}, {"v": 30.0})
        code = main(["-q", "eval", "--detections", str(tmp_path / "dets.json"),
                     "--annotations", str(tmp_path / "ann.json"), "--out", str(tmp_path / "report.csv"),
                     "--thresholds", "0.5", "0.7"])
        assert code == 0
        assert capsys.readouterr().out.strip() == "mAP@0.5=1.0000 mAP@0.7=1.0000 avg=1.0000"
        assert (tmp_path / "report.csv").read_text().splitlines()[0] == "class,threshold,ap,recall"

    def test_analyze_anchors(self, tiny_config_path: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        data = tmp_path / "data"
        main(["-q", "synth", "--spec", str(tiny_config_path), "--out", str(data)])
        capsys.readouterr()
        code = main(["-q", "analyze-anchors", "--config", str(tiny_config_path),
                     "--annotations", str(data / "annotations_train.json"), "--out", str(tmp_path / "hist.csv"),
                     "--num-scales", "5", "--plot", str(tmp_path / "hist.png")])
        assert code == 0
        printed = capsys.readouterr().out
        assert "small=" in printed and " all=" in printed
        assert (tmp_path / "hist.csv").read_text().startswith("scale_bucket,positives_per_gt,pdf,cdf")
        assert (tmp_path / "hist.png").stat().st_size > 0

    def test_errors_exit_nonzero(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        code = main(["synth", "--spec", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "out")])
        assert code == 1
        assert "ConfigurationError: cannot read configuration" in capsys.readouterr().err

    def test_bad_detections_file(self, tmp_path: Path) -> None:
        save_annotations(tmp_path / "ann.json", AnnotationFile((VideoAnnotation("v", 10, 30.0),), num_classes=1))
        (tmp_path / "dets.json").write_text("[]")
        code = main(["-q", "eval", "--detections", str(tmp_path / "dets.json"),
                     "--annotations", str(tmp_path / "ann.json"), "--out", str(tmp_path / "r.csv")])
        assert code == 1

    def test_undecodable_annotations_exit_nonzero(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        (tmp_path / "ann.json").write_bytes(b"\xff\xfe{}")
        (tmp_path / "dets.json").write_text("{}")
        code = main(["eval", "--detections", str(tmp_path / "dets.json"),
                     "--annotations", str(tmp_path / "ann.json"), "--out", str(tmp_path / "r.csv")])
        assert code == 1
        assert "AnnotationSchemaError" in capsys.readouterr().err
