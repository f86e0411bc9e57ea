import dataclasses

import numpy as np
import pytest
from scipy.ndimage import distance_transform_edt

from sgmnet import synthscene as S
from sgmnet.imageio import decode_pnm, encode_pnm
from sgmnet.synthscene import (ArrangementRule, DataError, DatasetManifest, ManifestError, MotifSpec,
                               SceneClassSpec, color_histogram, default_manifest, generate_dataset,
                               load_dataset, make_arrangement_pair, parse_manifest, render_image)

STRIPE = MotifSpec("stripe", (190, 190, 180), size=(6, 8))
SQUARES = MotifSpec("grid-of-squares", (200, 40, 40), size=(3, 4), count=(5, 7))


def tiny_manifest(per_class=3):
    man = default_manifest(seed=5, images_per_class=per_class)
    keep = {"train": [0, 1], "val": [12, 13], "test": [18, 19]}
    classes = [c for c in man.classes if any(c.class_id in v for v in keep.values())]
    return DatasetManifest(classes=classes, splits=keep, images_per_class=per_class, seed=5)


def test_render_is_deterministic_and_seed_dependent():
    spec = default_manifest().class_by_id(3)
    a, b = render_image(spec, 0, 4), render_image(spec, 0, 4)
    assert a.dtype == np.uint8 and a.shape == (64, 64, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, render_image(spec, 1, 4))
    assert not np.array_equal(a, render_image(spec, 0, 5))


def test_noise_free_fixed_class_repeats_one_image():
    motifs = (MotifSpec("stripe", (200, 200, 200), jitter=0, size=(5, 5)),
              MotifSpec("blob-cluster", (30, 90, 30), jitter=0, size=(3, 3), count=(4, 4)))
    spec = SceneClassSpec(0, motifs, (ArrangementRule("adjacent-on"),), noise=0, varied=False)
    first = render_image(spec, 3, 0)
    assert all(np.array_equal(first, render_image(spec, 3, i)) for i in range(1, 6))


def test_arrangement_pair_validation():
    a, b = make_arrangement_pair([STRIPE, SQUARES], ArrangementRule("parallel-to", offset=8),
                                 ArrangementRule("parallel-to", offset=8, angle=90), (0, 1))
    assert a.motifs == b.motifs and a.rules != b.rules
    with pytest.raises(ValueError):
        make_arrangement_pair([STRIPE, SQUARES], ArrangementRule("adjacent-on"), ArrangementRule("adjacent-on"), (0, 1))


def test_arrangement_pair_shares_colour_statistics():
    a, b = make_arrangement_pair([STRIPE, SQUARES], ArrangementRule("adjacent-on"),
                                 ArrangementRule("scattered-near", offset=4), (0, 1), background=(70, 100, 60))
    ha = np.mean([color_histogram(render_image(a, 0, i)) for i in range(100)], axis=0)
    hb = np.mean([color_histogram(render_image(b, 0, i)) for i in range(100)], axis=0)
    # three per-channel distributions, each summing to 1
    assert np.all(np.abs(ha - hb).reshape(3, -1).sum(axis=1) <= 0.02)
    chi2 = 0.5 * np.sum((ha - hb) ** 2 / np.maximum(ha + hb, 1e-12))
    assert chi2 < 0.01
    # layout differs: squares sit right beside the stripe in one class only
    da, db = [np.mean([squares_to_stripe(render_image(spec, 0, i)) for i in range(100)]) for spec in (a, b)]
    assert db - da > 3


def squares_to_stripe(img):
    """Mean distance from square pixels to the nearest stripe pixel, by nearest-colour labelling."""
    cols = np.array([(70, 100, 60), STRIPE.color, SQUARES.color], dtype=float)
    lab = np.argmin(((img.astype(float)[:, :, None, :] - cols) ** 2).sum(-1), axis=-1)
    return distance_transform_edt(lab != 1)[lab == 2].mean()


def test_histogram_is_normalised_per_channel():
    h = color_histogram(render_image(default_manifest().class_by_id(0), 0, 0))
    np.testing.assert_allclose(h.reshape(3, -1).sum(axis=1), 1.0)


@pytest.mark.parametrize("mutate, match", [
    (lambda s: dataclasses.replace(s, motifs=s.motifs[:1], rules=()), "at least 2"),
    (lambda s: dataclasses.replace(s, rules=(ArrangementRule("adjacent-on", 0, 5),)), "missing motif"),
    (lambda s: dataclasses.replace(s, rules=(ArrangementRule("orbits"),)), "unknown arrangement"),
    (lambda s: dataclasses.replace(s, motifs=(dataclasses.replace(s.motifs[0], color=(0, 0, 300)),) + s.motifs[1:]),
     "colour"),
    (lambda s: dataclasses.replace(s, motifs=(dataclasses.replace(s.motifs[0], size=(5, 2)),) + s.motifs[1:]),
     "invalid range"),
])
def test_class_invariants(mutate, match):
    spec = default_manifest().class_by_id(0)
    with pytest.raises(ManifestError, match=match):
        mutate(spec).validate()


def test_manifest_rejects_overlapping_splits(tmp_path):
    man = tiny_manifest()
    man.splits["val"] = [1, 12]
    with pytest.raises(ManifestError, match="class 1"):
        generate_dataset(man, tmp_path / "d")
    assert not (tmp_path / "d").exists()


def test_default_manifest_layout():
    man = default_manifest()
    assert len(man.classes) == 24 and man.images_per_class == 60
    assert [len(man.splits[s]) for s in ("train", "val", "test")] == [12, 6, 6]
    test = [man.class_by_id(c) for c in man.splits["test"]]
    duos = {(a.class_id, b.class_id) for a in test for b in test
            if a.class_id < b.class_id and a.motifs == b.motifs and a.rules != b.rules}
    assert len(duos) >= 2


def test_manifest_text_round_trip():
    man = default_manifest(seed=9, images_per_class=7)
    back = parse_manifest(S.manifest_to_text(man))
    assert back == man


@pytest.mark.parametrize("text, match", [
    ("seed = 0\nsplit.train = 0\nclass.0.motif.0 = stripe color=1,2\n", "triple"),
    ("seed = 0\nclass.x.noise = 3\n", "bad class key"),
    ("seed = 0\nclass.0.colour = 3\n", "unknown class field"),
    ("this line has no equals\n", "line 1"),
])
def test_manifest_parse_errors(text, match):
    with pytest.raises(ManifestError, match=match):
        parse_manifest(text)


def test_generate_and_load_round_trip(tmp_path):
    man = tiny_manifest()
    root = generate_dataset(man, tmp_path / "d")
    ds = load_dataset(root)
    for split, members in man.splits.items():
        assert ds[split].class_ids == sorted(members)
        assert len(ds[split]) == len(members) * man.images_per_class
    rel = ds["val"].paths[0]
    raw = decode_pnm((root / rel).read_bytes())
    np.testing.assert_array_equal(ds["val"].images[0], raw.transpose(2, 0, 1).astype(np.float32) / 255.0)
    spec = man.class_by_id(int(ds["val"].labels[0]))
    assert np.array_equal(raw, render_image(spec, man.seed, 0))


def test_generation_is_bit_identical_and_worker_independent(tmp_path):
    man = tiny_manifest(per_class=2)
    a = generate_dataset(man, tmp_path / "a")
    b = generate_dataset(man, tmp_path / "b", workers=2)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


def test_index_lists_every_image(tmp_path):
    man = tiny_manifest(per_class=2)
    root = generate_dataset(man, tmp_path / "d")
    lines = (root / S.INDEX_NAME).read_text().splitlines()
    assert len(lines) == 12
    assert all(len(l.split("\t")) == 4 for l in lines)


def test_truncated_image_is_a_data_error(tmp_path):
    root = generate_dataset(tiny_manifest(per_class=1), tmp_path / "d")
    victim = root / "c012" / "img0000.ppm"
    victim.write_bytes(victim.read_bytes()[:-10])
    with pytest.raises(DataError, match="img0000"):
        load_dataset(root)


def test_corrupted_pixels_fail_checksum(tmp_path):
    root = generate_dataset(tiny_manifest(per_class=1), tmp_path / "d")
    victim = root / "c018" / "img0000.ppm"
    img = decode_pnm(victim.read_bytes()).copy()
    img[0, 0, 0] ^= 1
    victim.write_bytes(encode_pnm(img))
    with pytest.raises(DataError, match="checksum"):
        load_dataset(root)


def test_missing_index(tmp_path):
    with pytest.raises(DataError, match="index"):
        load_dataset(tmp_path)


def test_default_dataset_file_count(tmp_path):
    root = generate_dataset(default_manifest(), tmp_path / "d", workers=S.default_workers())
    images = list(root.rglob("*.ppm"))
    assert len(images) == 1440
    assert len((root / S.INDEX_NAME).read_text().splitlines()) == 1440
