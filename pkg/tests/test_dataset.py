import numpy as np
import pytest

from eyeopen.dataset import Dataset, load_dataset, read_image, read_manifest, write_manifest, write_pgm
from eyeopen.errors import DataError


def test_pgm_round_trip_is_binary_p5(tmp_path):
    img = np.arange(48 * 128, dtype=np.int64).reshape(48, 128).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5") and raw.endswith(img.tobytes())
    assert np.array_equal(read_image(tmp_path / "a.pgm"), img)


def test_ppm_input_is_rgb(tmp_path):
    from PIL import Image

    rgb = np.zeros((4, 5, 3), np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb, "RGB").save(tmp_path / "c.ppm", format="PPM")
    assert (tmp_path / "c.ppm").read_bytes().startswith(b"P6")
    assert np.array_equal(read_image(tmp_path / "c.ppm"), rgb)


def test_write_pgm_rejects_float(tmp_path):
    with pytest.raises(DataError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2)))


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"not an image")
    with pytest.raises(DataError):
        read_image(tmp_path / "bad.pgm")


def test_manifest_round_trip_and_errors(tmp_path):
    recs = [{"path": "images/000000.pgm", "label_kind": "binary", "label": 1}]
    write_manifest(tmp_path / "manifest.jsonl", recs)
    assert read_manifest(tmp_path) == recs
    (tmp_path / "manifest.jsonl").write_text("{broken\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path)
    with pytest.raises(DataError):
        read_manifest(tmp_path / "missing")


def test_dataset_views(tmp_path):
    (tmp_path / "images").mkdir()
    recs = []
    for i, d in enumerate((0.0, 40.0, 90.0)):
        write_pgm(tmp_path / f"images/{i}.pgm", np.full((48, 128), i, np.uint8))
        recs.append({"path": f"images/{i}.pgm", "label_kind": "degree", "label": d, "openness_gt": d})
    write_manifest(tmp_path / "manifest.jsonl", recs)
    ds = load_dataset(tmp_path)
    assert ds.label_kind == "degree" and ds.labels.tolist() == [0.0, 40.0, 90.0]
    sub = ds.subset([2, 0])
    assert sub.degrees().tolist() == [90.0, 0.0] and sub.images[0, 0, 0] == 2
    mixed = Dataset(ds.images[:2], [recs[0], {"label_kind": "binary", "label": 1}])
    assert mixed.degrees() is None
    with pytest.raises(DataError):
        mixed.label_kind
