"""Exit codes and messages for the extraction command."""

from trifuse.data import read_dataset
from trifuse_extractor.cli import main


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestHappyPath:
    def test_exit_zero_and_summary(self, tmp_path, manifest_factory, toy_rows, capsys):
        manifest = manifest_factory(toy_rows(6))
        out = tmp_path / "toy.ttbf"
        code, stdout, _ = run(["--manifest", str(manifest), "--out", str(out)], capsys)
        assert code == 0
        assert f"wrote 6 of 6 records to {out} (0 errors)" in stdout
        header, _ = read_dataset(out)
        assert header.record_count == 6
        # default dims match the trainer's default feature layout
        assert (header.l_text, header.d_text) == (4, 16)

    def test_dims_flag_respected(self, tmp_path, manifest_factory, toy_rows, capsys):
        manifest = manifest_factory(toy_rows(3))
        out = tmp_path / "toy.ttbf"
        code, _, _ = run(
            ["--manifest", str(manifest), "--out", str(out), "--dims", "2,4,3,5,2,6"],
            capsys,
        )
        assert code == 0
        header, _ = read_dataset(out)
        assert (header.l_text, header.d_text) == (2, 4)
        assert (header.l_image, header.d_image) == (3, 5)
        assert (header.l_imgtext, header.d_imgtext) == (2, 6)


class TestPartialFailure:
    def test_exit_one_but_file_written(self, tmp_path, manifest_factory, toy_rows, capsys):
        rows = toy_rows(6)
        rows[2]["image_path"] = str(tmp_path / "gone.img")
        manifest = manifest_factory(rows)
        out = tmp_path / "toy.ttbf"
        code, stdout, stderr = run(["--manifest", str(manifest), "--out", str(out)], capsys)
        assert code == 1
        assert "row 2 (id 2): FileNotFoundError" in stderr
        assert f"wrote 5 of 6 records to {out} (1 errors)" in stdout
        header, _ = read_dataset(out)
        assert header.record_count == 5


class TestUsageErrors:
    def test_missing_required_flag(self, tmp_path, capsys):
        code, _, stderr = run(["--manifest", str(tmp_path / "m.csv")], capsys)
        assert code == 2
        assert "--out" in stderr

    def test_unknown_backend(self, tmp_path, capsys):
        code, _, stderr = run(
            ["--manifest", "m.csv", "--out", "o.ttbf", "--backend", "quantum"], capsys
        )
        assert code == 2
        assert "invalid choice" in stderr


class TestInputErrors:
    def test_bad_dims(self, tmp_path, manifest_factory, toy_rows, capsys):
        manifest = manifest_factory(toy_rows(2))
        code, _, stderr = run(
            ["--manifest", str(manifest), "--out", str(tmp_path / "o.ttbf"), "--dims", "4,16"],
            capsys,
        )
        assert code == 1
        assert "error: ValueError" in stderr

    def test_missing_manifest(self, tmp_path, capsys):
        code, _, stderr = run(
            ["--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o.ttbf")],
            capsys,
        )
        assert code == 1
        assert "error: FileNotFoundError" in stderr
