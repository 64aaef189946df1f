import time

import numpy as np
import pytest

from gendet.synthdata import (
    DataError,
    DetectionSample,
    SceneConfig,
    Vocabulary,
    VocabularyError,
    build_vocabulary,
    detokenize,
    generate_scene,
    read_dataset,
    read_ppm,
    tokenize,
    write_dataset,
    write_ppm,
)


@pytest.fixture
def cfg():
    return SceneConfig().validate()


@pytest.fixture
def vocab(cfg):
    return build_vocabulary(cfg)


class TestVocabulary:
    def test_reserved_ids(self, vocab):
        assert vocab.word_id("red") >= 2
        assert len(vocab) == len(vocab.words) + 2

    def test_tokenize_known_phrase(self, vocab):
        ids = tokenize("red triangle", vocab)
        assert ids == (vocab.word_id("red"), vocab.word_id("triangle"))

    def test_empty_string(self, vocab):
        assert tokenize("", vocab) == ()

    def test_round_trip_all_generator_phrases(self, cfg, vocab):
        sizes = ["", "small ", "big "] if cfg.size_words else [""]
        for size in sizes:
            for color, _ in cfg.colors:
                for shape in cfg.shapes:
                    phrase = f"{size}{color} {shape}"
                    assert detokenize(tokenize(phrase, vocab), vocab) == phrase

    def test_unknown_word_rejected(self, vocab):
        with pytest.raises(VocabularyError):
            tokenize("octarine blob", vocab)

    def test_reserved_id_rejected_on_detokenize(self, vocab):
        with pytest.raises(VocabularyError):
            detokenize((0,), vocab)
        with pytest.raises(VocabularyError):
            detokenize((len(vocab),), vocab)


class TestGenerateScene:
    def test_same_seed_bit_identical(self, cfg, vocab):
        a = generate_scene(123, cfg, vocab)
        b = generate_scene(123, cfg, vocab)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.boxes, b.boxes)
        assert a.names == b.names

    def test_boxes_inside_unit_square(self, cfg, vocab):
        for seed in range(100):
            s = generate_scene(seed, cfg, vocab)
            xyxy = np.stack(
                [
                    s.boxes[:, 0] - s.boxes[:, 2] / 2,
                    s.boxes[:, 1] - s.boxes[:, 3] / 2,
                    s.boxes[:, 0] + s.boxes[:, 2] / 2,
                    s.boxes[:, 1] + s.boxes[:, 3] / 2,
                ],
                axis=1,
            )
            assert (xyxy >= 0).all() and (xyxy <= 1).all()
            assert (s.boxes[:, 2:] > 0).all()

    def test_box_matches_rendered_extent_on_single_shape(self, vocab):
        # one shape per scene: no occlusion, so the non-background pixels
        # are exactly the object and the stored box must bound them tightly
        cfg = SceneConfig(min_shapes=1, max_shapes=1).validate()
        for seed in range(50):
            s = generate_scene(seed, cfg, vocab)
            bg = np.array(cfg.background, dtype=np.float64) / 255.0
            fg = np.abs(s.image - bg).sum(axis=2) > 1e-9
            ys, xs = np.nonzero(fg)
            px = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
            size = cfg.image_size
            box = s.boxes[0]
            got = np.array(
                [
                    (box[0] - box[2] / 2) * size,
                    (box[1] - box[3] / 2) * size,
                    (box[0] + box[2] / 2) * size,
                    (box[1] + box[3] / 2) * size,
                ]
            )
            assert np.abs(got - px).max() <= 1.0

    def test_shape_count_in_range(self, cfg, vocab):
        counts = [len(generate_scene(seed, cfg, vocab).boxes) for seed in range(1000)]
        assert min(counts) >= cfg.min_shapes
        assert max(counts) <= cfg.max_shapes
        assert len(set(counts)) > 1

    def test_names_fit_text_slots(self, cfg, vocab):
        for seed in range(200):
            s = generate_scene(seed, cfg, vocab)
            assert len(s.boxes) == len(s.names)
            for name in s.names:
                assert 1 <= len(name) <= 3  # fits K-1 for every K >= 4

    def test_image_values_are_u8_grid(self, cfg, vocab):
        s = generate_scene(0, cfg, vocab)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert np.array_equal(s.image, np.rint(s.image * 255) / 255)

    def test_throughput(self, cfg, vocab):
        generate_scene(0, cfg, vocab)
        start = time.perf_counter()
        for seed in range(300):
            generate_scene(seed, cfg, vocab)
        elapsed = time.perf_counter() - start
        assert 300 / elapsed > 100  # samples per second, single core


class TestPpm:
    def test_round_trip_bit_exact(self, cfg, vocab, tmp_path):
        s = generate_scene(5, cfg, vocab)
        path = tmp_path / "img.ppm"
        write_ppm(path, s.image)
        back = read_ppm(path)
        assert np.array_equal(back, s.image)

    def test_header_format(self, tmp_path):
        path = tmp_path / "img.ppm"
        write_ppm(path, np.zeros((2, 3, 3)))
        blob = path.read_bytes()
        assert blob.startswith(b"P6\n3 2\n255\n")
        assert len(blob) == len(b"P6\n3 2\n255\n") + 18

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
        with pytest.raises(DataError, match="P6"):
            read_ppm(path)

    def test_rejects_truncated_pixels(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
        with pytest.raises(DataError, match="pixel bytes"):
            read_ppm(path)

    def test_rejects_bad_maxval(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + b"\x00" * 3)
        with pytest.raises(DataError, match="maxval"):
            read_ppm(path)


class TestDatasetIO:
    def test_write_read_round_trip(self, cfg, vocab, tmp_path):
        samples = [generate_scene(seed, cfg, vocab) for seed in range(5)]
        write_dataset(tmp_path / "ds", samples, vocab)
        back, vocab2 = read_dataset(tmp_path / "ds")
        assert vocab2.words == vocab.words
        assert len(back) == 5
        for a, b in zip(samples, back):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.boxes, b.boxes)
            assert a.names == b.names

    def test_empty_dataset_round_trips(self, vocab, tmp_path):
        write_dataset(tmp_path / "ds", [], vocab)
        back, vocab2 = read_dataset(tmp_path / "ds")
        assert back == [] and vocab2.words == vocab.words

    def test_golden_fixture(self, vocab, tmp_path):
        # a known sample written by the writer parses back to known values
        image = np.zeros((4, 4, 3))
        image[1:3, 1:3] = np.array([200, 16, 16]) / 255.0
        sample = DetectionSample(
            image=image,
            boxes=np.array([[0.5, 0.5, 0.5, 0.5]]),
            names=[(vocab.word_id("red"), vocab.word_id("square"))],
        )
        write_dataset(tmp_path / "ds", [sample], vocab)
        ann = (tmp_path / "ds" / "annotations.json").read_text()
        assert '"version": 1' in ann and '"0001.ppm"' in ann
        back, _ = read_dataset(tmp_path / "ds")
        assert np.array_equal(back[0].image, image)
        assert back[0].names == [tuple(tokenize("red square", vocab))]
        np.testing.assert_array_equal(back[0].boxes, sample.boxes)

    def test_malformed_json_reports_position(self, tmp_path):
        ds = tmp_path / "ds"
        ds.mkdir()
        (ds / "annotations.json").write_text('{"version": 1,\n  "vocab": [,]\n}')
        with pytest.raises(DataError, match=r"line 2"):
            read_dataset(ds)

    def test_missing_keys_rejected(self, tmp_path):
        ds = tmp_path / "ds"
        ds.mkdir()
        (ds / "annotations.json").write_text('{"version": 1}')
        with pytest.raises(DataError, match="missing keys"):
            read_dataset(ds)

    def test_wrong_version_rejected(self, tmp_path):
        ds = tmp_path / "ds"
        ds.mkdir()
        (ds / "annotations.json").write_text(
            '{"version": 2, "vocab": [], "samples": []}'
        )
        with pytest.raises(DataError, match="version"):
            read_dataset(ds)

    def test_out_of_vocab_token_rejected(self, tmp_path):
        ds = tmp_path / "ds"
        ds.mkdir()
        write_ppm(ds / "0001.ppm", np.zeros((2, 2, 3)))
        (ds / "annotations.json").write_text(
            '{"version": 1, "vocab": ["red"], "samples": '
            '[{"image": "0001.ppm", "boxes": [[0.5, 0.5, 0.1, 0.1]], "names": [[9]]}]}'
        )
        with pytest.raises(DataError, match="token id 9"):
            read_dataset(ds)
