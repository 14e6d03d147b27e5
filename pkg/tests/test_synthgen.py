import json

import numpy as np
import pytest

from ctclab.ctc import collapse, min_admissible_T
from ctclab.decode import Segment, check_segments, frame_labels
from ctclab.synthgen import (
    GenConfig,
    InvalidConfig,
    MissingDataset,
    extract_isolated,
    generate,
    read_dataset,
    read_split,
    sample_from_line,
    sample_to_line,
    uniform_pseudoalign,
    write_dataset,
)


def test_same_seed_same_bytes(tmp_path, small_cfg):
    a = write_dataset(generate(small_cfg, 4), tmp_path / "a")
    b = write_dataset(generate(small_cfg, 4), tmp_path / "b")
    c = write_dataset(generate(small_cfg, 5), tmp_path / "c")
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == (tmp_path / "b" / f"{split}.jsonl").read_bytes()
    assert a["splits"] == b["splits"]
    assert a["splits"]["train"]["sha256"] != c["splits"]["train"]["sha256"]


def test_counts_and_splits():
    ds = generate(GenConfig(num_sentences=100, num_glosses=5), 0)
    assert sum(len(v) for v in ds.splits.values()) == 100
    assert len(ds.splits["val"]) == len(ds.splits["test"]) == 10


def test_signer_independent_split_holds_out_a_style():
    cfg = GenConfig(num_sentences=80, num_glosses=5, split_mode="SI", num_styles=4)
    ds = generate(cfg, 1)
    held = cfg.num_styles - 1
    assert all(s.signer_style != held for s in ds.splits["train"])
    assert all(s.signer_style == held for s in ds.splits["val"] + ds.splits["test"])


def test_samples_are_consistent(small_dataset, small_cfg):
    for samples in small_dataset.splits.values():
        for s in samples:
            assert tuple(seg.gloss for seg in s.segments) == s.glosses
            check_segments(s.segments, s.n_frames)
            assert small_cfg.min_len <= len(s.glosses) <= small_cfg.max_len
            assert min_admissible_T(s.glosses) <= s.n_frames // small_cfg.downsample
            assert s.frames.shape[1] == small_cfg.dim
            assert collapse(frame_labels(s.segments, s.n_frames)) == s.glosses


def test_isolated_extraction(small_dataset):
    train = small_dataset.splits["train"]
    iso = extract_isolated(train[:1])
    assert len(iso) == len(train[0].glosses)
    protos = {p.gloss: p for p in small_dataset.prototypes}
    for frames, g, src in extract_isolated(train):
        assert protos[g].dur_min <= len(frames) <= protos[g].dur_max
        assert 1 <= g < small_dataset.vocab.size


def test_uniform_pseudoalign():
    assert uniform_pseudoalign(10, (1, 2)) == [Segment(0, 4, 1), Segment(5, 9, 2)]
    assert [len(s) for s in uniform_pseudoalign(10, (1, 2, 3))] == [4, 3, 3]
    assert [s.gloss for s in uniform_pseudoalign(7, (3, 1, 3))] == [3, 1, 3]


def test_round_trip(small_dataset, small_data_dir):
    back = read_dataset(small_data_dir)
    assert back.config == small_dataset.config
    for split, samples in small_dataset.splits.items():
        for a, b in zip(samples, back.splits[split]):
            assert a.id == b.id and a.glosses == b.glosses and a.segments == b.segments
            assert np.array_equal(a.frames, b.frames)
    s = samples[0]
    assert sample_to_line(sample_from_line(sample_to_line(s, back.vocab), back.vocab), back.vocab) == \
        sample_to_line(s, back.vocab)


def test_manifest_checksums(small_data_dir):
    import hashlib

    manifest = json.loads((small_data_dir / "manifest.json").read_text())
    for split, info in manifest["splits"].items():
        data = (small_data_dir / info["file"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == info["sha256"]


def test_config_errors(tmp_path):
    with pytest.raises(InvalidConfig, match="bogus"):
        GenConfig.from_dict({"bogus": 1})
    with pytest.raises(InvalidConfig):
        GenConfig(min_len=5, max_len=3).validate()
    with pytest.raises(InvalidConfig):
        GenConfig(split_mode="XX").validate()
    with pytest.raises(MissingDataset):
        read_dataset(tmp_path)
    with pytest.raises(MissingDataset):
        read_split(tmp_path, "train")


def test_noise_free_frames_equal_styled_prototypes():
    ds = generate(GenConfig(num_sentences=20, num_glosses=4, noise=0.0), 2)
    s = ds.splits["train"][0]
    A, b = ds.styles[s.signer_style]
    for seg in s.segments:
        target = A @ ds.prototypes[seg.gloss - 1].mean + b
        assert np.allclose(s.frames[seg.start : seg.end + 1], target, atol=1e-8)
