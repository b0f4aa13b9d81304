import numpy as np
import pytest
import torch

from focusfix.data import BACKGROUND, checkerboard_patch
from focusfix.masks import MaskConfig, RegionMask, dilate, extract_region, keep_main_components, threshold_mask
from focusfix.rewards import DefectFilterReward
from focusfix.schedule import ConfigurationError


def mask_of(arr) -> RegionMask:
    return RegionMask(torch.tensor(arr, dtype=torch.float32))


class TestThreshold:
    def test_zero_heatmap_gives_empty(self):
        m = threshold_mask(torch.zeros(4, 4), 0.5)
        assert m.empty and m.area == 0

    def test_ones_heatmap_gives_full(self):
        m = threshold_mask(torch.ones(4, 4), 0.5)
        assert m.area == 16 and not m.empty

    def test_elementwise_comparison(self):
        hm = torch.tensor([[0.2, 0.7], [0.9, 0.1]])
        m = threshold_mask(hm, 0.5)
        assert torch.equal(m.data, torch.tensor([[0.0, 1.0], [1.0, 0.0]]))

    def test_invalid_tau(self):
        with pytest.raises(ConfigurationError):
            threshold_mask(torch.zeros(2, 2), 1.5)
        with pytest.raises(ConfigurationError):
            threshold_mask(torch.zeros(2, 2), -0.1)

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            hm = torch.from_numpy(rng.random((8, 8), dtype=np.float64).astype(np.float32))
            t1, t2 = sorted(rng.random(2))
            m1 = threshold_mask(hm, float(t1)).data
            m2 = threshold_mask(hm, float(t2)).data
            assert bool((m2 <= m1).all())


class TestComponents:
    def test_single_component_unchanged(self):
        arr = np.zeros((8, 8))
        arr[2:5, 2:5] = 1
        m = keep_main_components(mask_of(arr))
        assert torch.equal(m.data, mask_of(arr).data)
        assert m.component_count == 1

    def test_small_component_removed(self):
        arr = np.zeros((10, 10))
        arr[0:5, 0:2] = 1  # area 10
        arr[8:9, 8:10] = 1  # area 2
        m = keep_main_components(mask_of(arr), min_area=4)
        expected = np.zeros((10, 10))
        expected[0:5, 0:2] = 1
        assert np.array_equal(m.numpy(), expected.astype(bool))

    def test_empty_in_empty_out(self):
        m = keep_main_components(mask_of(np.zeros((6, 6))))
        assert m.empty

    def test_top_k_by_area(self):
        arr = np.zeros((12, 12))
        arr[0:4, 0:4] = 1  # 16
        arr[6:9, 0:3] = 1  # 9
        arr[0:2, 8:12] = 1  # 8
        arr[10:12, 8:12] = 1  # 8 — fourth largest is dropped at k=3
        m = keep_main_components(mask_of(arr), min_area=4, max_components=3)
        assert m.component_count == 3
        assert m.area == 16 + 9 + 8

    def test_never_adds_pixels_and_flood_fill_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            arr = (rng.random((10, 10)) < 0.35).astype(float)
            m = keep_main_components(mask_of(arr), min_area=3, max_components=2)
            assert bool((m.data <= torch.tensor(arr, dtype=torch.float32)).all())
            # oracle: flood-fill labeling with 4-connectivity
            comps = _flood_components(arr.astype(bool))
            comps = [c for c in sorted(comps, key=len, reverse=True) if len(c) >= 3][:2]
            expected = np.zeros((10, 10), bool)
            for comp in comps:
                for y, x in comp:
                    expected[y, x] = True
            assert m.area == int(expected.sum())


def _flood_components(arr):
    seen = np.zeros_like(arr, dtype=bool)
    comps = []
    h, w = arr.shape
    for y in range(h):
        for x in range(w):
            if arr[y, x] and not seen[y, x]:
                stack, comp = [(y, x)], []
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    comp.append((cy, cx))
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and arr[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(comp)
    return comps


class TestDilate:
    def test_radius_zero_is_identity(self):
        arr = (np.random.default_rng(2).random((8, 8)) < 0.3).astype(float)
        m = dilate(mask_of(arr), 0)
        assert torch.equal(m.data, mask_of(arr).data)

    def test_single_pixel_becomes_block(self):
        arr = np.zeros((7, 7))
        arr[3, 3] = 1
        m = dilate(mask_of(arr), 1)
        expected = np.zeros((7, 7))
        expected[2:5, 2:5] = 1
        assert np.array_equal(m.numpy(), expected.astype(bool))
        # clipped at borders
        arr2 = np.zeros((5, 5))
        arr2[0, 0] = 1
        m2 = dilate(mask_of(arr2), 1)
        expected2 = np.zeros((5, 5))
        expected2[0:2, 0:2] = 1
        assert np.array_equal(m2.numpy(), expected2.astype(bool))

    def test_full_stays_full(self):
        m = dilate(mask_of(np.ones((6, 6))), 2)
        assert m.area == 36

    def test_negative_radius(self):
        with pytest.raises(ConfigurationError):
            dilate(mask_of(np.zeros((4, 4))), -1)

    def test_extensive_and_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            arr = (rng.random((9, 9)) < 0.2).astype(float)
            m = mask_of(arr)
            d1 = dilate(m, 1).data
            d2 = dilate(m, 2).data
            assert bool((m.data <= d1).all())
            assert bool((d1 <= d2).all())


class TestExtractRegion:
    def test_planted_defect_coverage(self):
        reward = DefectFilterReward(image_size=32)
        rng = np.random.default_rng(4)
        for _ in range(20):
            r = int(rng.integers(0, 14)) * 2
            c = int(rng.integers(0, 14)) * 2
            img = torch.full((3, 32, 32), BACKGROUND)
            img[:, r : r + 6, c : c + 6] = torch.from_numpy(checkerboard_patch())
            hm = reward.heatmap_batch(img.unsqueeze(0))[0]
            mask = extract_region(hm, MaskConfig())
            box = torch.zeros(32, 32)
            box[r : r + 6, c : c + 6] = 1.0
            coverage = float((mask.data * box).sum() / box.sum())
            assert coverage >= 0.9

    def test_zero_heatmap_flagged_empty(self):
        m = extract_region(torch.zeros(16, 16), MaskConfig())
        assert m.empty

    def test_tau_zero_gives_full_mask(self):
        hm = torch.rand(8, 8, generator=torch.Generator().manual_seed(0))
        m = extract_region(hm, MaskConfig(threshold=0.0))
        assert m.area == 64

    def test_deterministic(self):
        hm = torch.rand(16, 16, generator=torch.Generator().manual_seed(5))
        a = extract_region(hm, MaskConfig())
        b = extract_region(hm, MaskConfig())
        assert torch.equal(a.data, b.data)
