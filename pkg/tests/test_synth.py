import dataclasses
import os

import numpy as np
import pytest

from polyformer.engine import ContractError
from polyformer.errors import FormatError
from polyformer.synth import (CUP, DISC, DomainSpec, default_source_spec, default_target_spec,
                              few_shot_split, generate_dataset, generate_sample, load_sample,
                              mean_intensity_probe, read_manifest, save_sample, stack, write_dataset)


@pytest.fixture(scope="module")
def pair():
    return generate_dataset(default_source_spec(), 40), generate_dataset(default_target_spec(), 40)


class TestGeneration:
    def test_deterministic(self):
        a, b = generate_sample(default_source_spec(), 7), generate_sample(default_source_spec(), 7)
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()

    def test_shapes_and_ranges(self, pair):
        s = pair[0][0]
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert s.mask.shape == (64, 64) and s.mask.dtype == np.uint8
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert set(np.unique(s.mask)) <= {0, 1, 2}

    def test_cup_inside_disc(self, pair):
        for s in pair[0][:20]:
            cup = s.mask == CUP
            assert cup.any()
            # every cup pixel's 4-neighbours are disc or cup
            region = s.mask >= DISC
            padded = np.pad(region, 1)
            neighbours = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
            assert np.all(neighbours[cup])
            assert cup.sum() < region.sum()

    def test_appearance_leaves_geometry_alone(self):
        spec = default_source_spec()
        shifted = dataclasses.replace(default_target_spec(), seed_base=spec.seed_base)
        a, b = generate_sample(spec, 3), generate_sample(shifted, 3)
        assert a.mask.tobytes() == b.mask.tobytes()
        assert a.image.tobytes() != b.image.tobytes()

    def test_domains_separable_by_intensity(self, pair):
        assert mean_intensity_probe(*pair) > 0.9

    @pytest.mark.parametrize("kwargs", [{"brightness_shift": 0.9}, {"contrast_scale": 0.1}, {"noise_std": -1}])
    def test_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            DomainSpec(**kwargs)

    def test_spec_dict_roundtrip(self):
        spec = default_target_spec()
        assert DomainSpec.from_dict(spec.to_dict()) == spec


class TestSplit:
    def test_sizes_and_disjoint(self, pair):
        tgt = generate_dataset(default_target_spec(), 60)
        shots, rest = few_shot_split(tgt, 5, seed=0)
        assert len(shots) == 5 and len(rest) == 55
        assert not {s.id for s in shots} & {s.id for s in rest}

    def test_seeded(self, pair):
        a = [s.id for s in few_shot_split(pair[1], 5, 1)[0]]
        b = [s.id for s in few_shot_split(pair[1], 5, 1)[0]]
        assert a == b

    @pytest.mark.parametrize("k", [0, 40, 41])
    def test_invalid_k(self, pair, k):
        with pytest.raises(ContractError):
            few_shot_split(pair[1], k, 0)

    def test_stack(self, pair):
        x, y = stack(pair[0][:3])
        assert x.shape == (3, 3, 64, 64) and x.dtype == np.float32 and y.dtype == np.int64


class TestFiles:
    def test_roundtrip(self, tmp_path, pair):
        s = pair[1][2]
        back = load_sample(*save_sample(s, tmp_path))
        np.testing.assert_array_equal(back.mask, s.mask)
        assert np.abs(back.image - s.image).max() <= 0.5 / 255 + 1e-6

    def test_manifest(self, tmp_path, pair):
        path = write_dataset(pair[0][:3], tmp_path / "ds", default_source_spec())
        back = read_manifest(os.path.dirname(path))
        assert [s.id for s in back] == [s.id for s in pair[0][:3]]
        assert back[0].domain == "source"

    def test_truncated(self, tmp_path, pair):
        img, mask = save_sample(pair[0][0], tmp_path)
        raw = open(img, "rb").read()
        with open(img, "wb") as fh:
            fh.write(raw[:-10])
        with pytest.raises(FormatError) as info:
            load_sample(img, mask)
        assert info.value.offset == len(raw) - 10

    def test_bad_magic(self, tmp_path, pair):
        img, mask = save_sample(pair[0][0], tmp_path)
        with pytest.raises(FormatError) as info:
            load_sample(mask, mask)
        assert info.value.offset == 0
