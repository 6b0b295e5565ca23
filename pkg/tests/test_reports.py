import json

import numpy as np
import pytest
from PIL import Image

from metrics import CurveResult
from reports import (git_describe, save_overlay, save_pgm, save_signed_png, signed_colormap, to_gray, write_curves,
                     write_rows, write_summary)


def test_constant_map_is_mid_gray():
    np.testing.assert_array_equal(to_gray(np.full((3, 3), 0.7)), np.full((3, 3), 128))


def test_two_level_map_uses_the_full_range():
    gray = to_gray(np.array([[0.5, -1.0], [-1.0, 0.5]]))
    assert set(np.unique(gray)) == {0, 255}


def test_pgm_is_a_grayscale_image(tmp_path):
    path = save_pgm(np.arange(12.0).reshape(3, 4), tmp_path / "map.pgm")
    assert path.read_bytes().startswith(b"P5")
    with Image.open(path) as image:
        assert image.mode == "L"
        assert image.size == (4, 3)


def test_signed_colormap_endpoints():
    rgb = signed_colormap(np.array([[-2.0, 0.0, 2.0]]))
    np.testing.assert_allclose(rgb[0], [[0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [1.0, 0.0, 0.0]])


def test_png_outputs(tmp_path):
    value = np.random.default_rng(0).normal(size=(8, 8))
    with Image.open(save_signed_png(value, tmp_path / "s.png")) as image:
        assert image.mode == "RGB"
    with Image.open(save_overlay(np.zeros((3, 8, 8)), value, tmp_path / "o.png")) as image:
        assert image.size == (8, 8)


def test_rows_are_plain_csv(tmp_path):
    path = write_rows(tmp_path / "rows.csv", [{"layer": "stage1.block1.out", "tv": 0.1, "sample": np.int64(3)}])
    assert path.read_text() == "layer,tv,sample\nstage1.block1.out,0.1,3\n"


def test_curves_csv(tmp_path):
    curve = CurveResult(0.5, np.array([0.0, 1.0]), np.array([0.75, 0.25]))
    text = write_curves(tmp_path / "curves.csv", [({"sample": 1}, curve)]).read_text().splitlines()
    assert text == ["sample,step,fraction,probability", "1,0,0.0,0.75", "1,1,1.0,0.25"]


def test_summary_header(tmp_path):
    path = write_summary(tmp_path / "summary.json", {"mean": np.float64(1.5), "values": np.arange(2)}, seed=4,
                         layers=["stage2.block1.out", "input"], reduce_mode="sum", smoothgrad=True)
    document = json.loads(path.read_text())
    assert document["layers"] == {"stage2.block1.out": "2_1", "input": "Input"}
    assert document["reduce_mode"] == "sum"
    assert document["smoothgrad"] is True
    assert document["results"] == {"mean": 1.5, "values": [0, 1]}
    assert isinstance(document["code"], str)


def test_git_describe_outside_a_checkout(tmp_path):
    assert git_describe(tmp_path) == "unknown"


@pytest.mark.parametrize("shape", [(1, 4, 4), (3, 4, 4)])
def test_overlay_accepts_gray_and_color(shape, tmp_path):
    save_overlay(np.ones(shape) * 0.5, np.zeros((4, 4)), tmp_path / "o.png")
