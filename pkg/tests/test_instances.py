"""Affinity and progressive merging tests."""

import json
import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.exceptions import InputError, ScheduleError
from src.instances import (
    affinity_edges,
    dump_instances,
    linear_schedule,
    merge_observations,
    pair_affinity,
    progressive_merge,
)
from src.models import (
    AdjacencyGraph,
    MergeSchedule,
    PointCloud,
    Superpoint,
    ViewObservation,
)


def obs(fid, visible, total, feature):
    return ViewObservation(
        frame_id=fid, visible_pixels=visible, total_pixels=total, mask_feature=feature
    )


def chain(sizes):
    """Superpoints with the given point counts, adjacent in a chain, on a random cloud."""
    rng = np.random.default_rng(3)
    cloud = PointCloud(
        positions=rng.uniform(0, 1, size=(sum(sizes), 3)), colors=np.zeros((sum(sizes), 3))
    )
    sps, start = [], 0
    for k, n in enumerate(sizes):
        sps.append(
            Superpoint(
                sp_id=k,
                point_indices=np.arange(start, start + n),
                centroid=(0, 0, 0),
                mean_normal=(0, 0, 1),
                mean_color=(0, 0, 0),
            )
        )
        start += n
    edges = {(k, k + 1) for k in range(len(sizes) - 1)}
    graph = AdjacencyGraph(nodes=tuple(range(len(sizes))), edges=edges)
    return sps, graph, cloud


class TestPairAffinity:
    """Tests for pair_affinity."""

    def test_product_of_fractions_and_cosine(self):
        """One shared view: frac_i * frac_j * cos."""
        a = [obs(0, 8, 10, (1.0, 0.0)), obs(1, 5, 5, (1.0, 0.0))]
        b = [obs(0, 5, 10, (1.0, 0.0))]
        aff, m = pair_affinity(a, b)
        assert aff == pytest.approx(0.4)
        assert m == 1

    def test_orthogonal_features(self):
        """Disjoint mask coverage gives zero affinity over one view."""
        aff, m = pair_affinity([obs(0, 5, 5, (1.0, 0.0))], [obs(0, 5, 5, (0.0, 1.0))])
        assert aff == 0.0
        assert m == 1

    def test_no_shared_view(self):
        """Superpoints never seen together have affinity 0 over 0 views."""
        assert pair_affinity([obs(0, 5, 5, (1.0,))], [obs(1, 5, 5, (1.0,))]) == (0.0, 0)

    def test_invisible_views_skipped(self):
        """Views where either side is fully occluded do not count."""
        a = [obs(0, 0, 10, (0.0,)), obs(1, 10, 10, (1.0,))]
        b = [obs(0, 10, 10, (1.0,)), obs(1, 10, 10, (1.0,))]
        assert pair_affinity(a, b) == (pytest.approx(1.0), 1)

    def test_mean_over_views(self):
        """The affinity averages the per-view terms."""
        a = [obs(0, 10, 10, (1.0,)), obs(1, 5, 10, (1.0,))]
        b = [obs(0, 10, 10, (1.0,)), obs(1, 10, 10, (1.0,))]
        aff, m = pair_affinity(a, b)
        assert aff == pytest.approx(0.75)
        assert m == 2

    def test_point_count_denominator(self):
        """Superpoint sizes replace the projected pixel counts."""
        aff, _ = pair_affinity([obs(0, 8, 10, (1.0,))], [obs(0, 8, 10, (1.0,))], 16, 16)
        assert aff == pytest.approx(0.25)

    def test_symmetric(self):
        """Swapping the pair does not change the affinity."""
        a = [obs(0, 3, 9, (0.2, 0.7)), obs(2, 4, 4, (0.5, 0.5))]
        b = [obs(0, 6, 7, (0.6, 0.1)), obs(2, 1, 8, (0.0, 1.0))]
        assert pair_affinity(a, b) == pair_affinity(b, a)


class TestAffinityEdges:
    """Tests for affinity_edges."""

    def test_edges_sorted_with_views(self):
        """One AffinityEdge per graph edge."""
        graph = AdjacencyGraph(nodes=(0, 1, 2), edges={(1, 2), (0, 1)})
        observations = {0: [obs(0, 5, 5, (1.0,))], 1: [obs(0, 5, 5, (1.0,))], 2: []}
        edges = affinity_edges(graph, observations, workers=2)
        assert [(e.i, e.j) for e in edges] == [(0, 1), (1, 2)]
        assert edges[0].affinity == pytest.approx(1.0)
        assert edges[0].contributing_views == 1
        assert edges[1].affinity == 0.0
        assert edges[1].contributing_views == 0


class TestSchedule:
    """Tests for merge threshold schedules."""

    def test_linear(self):
        """Five stages from 0.9 to 0.5."""
        assert linear_schedule(0.9, 0.5, 5).thresholds == pytest.approx((0.9, 0.8, 0.7, 0.6, 0.5))

    def test_rejects_non_decreasing(self):
        """start must exceed end and there must be two stages."""
        with pytest.raises(ScheduleError):
            linear_schedule(0.5, 0.9, 5)
        with pytest.raises(ScheduleError):
            linear_schedule(0.9, 0.5, 1)

    def test_model_validation(self):
        """Explicit schedules must be strictly decreasing in [0, 1]."""
        with pytest.raises(ValidationError):
            MergeSchedule(thresholds=(0.5, 0.5))
        with pytest.raises(ValidationError):
            MergeSchedule(thresholds=(1.5, 0.5))
        with pytest.raises(ValidationError):
            MergeSchedule(thresholds=())


class TestAffinityAgainstPixels:
    """pair_affinity against a per-pixel count on random mini-scenes."""

    PIXELS = 48

    @staticmethod
    def random_view(rng, n_superpoints):
        """Per view: mask pixel sets and (projected, visible) pixel sets per superpoint."""

        def subset(pool, density):
            return {p for p in pool if rng.random() < density}

        pixels = range(TestAffinityAgainstPixels.PIXELS)
        masks = [subset(pixels, rng.uniform(0.1, 0.6)) for _ in range(int(rng.integers(0, 5)))]
        seen = []
        for _ in range(n_superpoints):
            projected = subset(pixels, rng.uniform(0.0, 0.4))
            seen.append((projected, subset(projected, rng.uniform(0.0, 1.0))))
        return masks, seen

    @staticmethod
    def observations(views, k):
        out = []
        for fid, (masks, seen) in enumerate(views):
            projected, visible = seen[k]
            if projected:
                feature = TestAffinityAgainstPixels.feature(visible, masks)
                out.append(obs(fid, len(visible), len(projected), tuple(feature)))
        return out

    @staticmethod
    def feature(visible, masks):
        hits = [0] * len(masks)
        for p in visible:
            for k, m in enumerate(masks):
                if p in m:
                    hits[k] += 1
        den = max(len(visible), sum(hits))
        return [h / den if den else 0.0 for h in hits]

    @staticmethod
    def reference(views, i, j):
        terms = []
        for masks, seen in views:
            (proj_i, vis_i), (proj_j, vis_j) = seen[i], seen[j]
            if not vis_i or not vis_j:
                continue
            fi = TestAffinityAgainstPixels.feature(vis_i, masks)
            fj = TestAffinityAgainstPixels.feature(vis_j, masks)
            dot = sum(a * b for a, b in zip(fi, fj, strict=True))
            norm = math.sqrt(sum(a * a for a in fi)) * math.sqrt(sum(b * b for b in fj))
            cos = dot / norm if norm else 0.0
            terms.append(len(vis_i) / len(proj_i) * len(vis_j) / len(proj_j) * max(0.0, cos))
        return (sum(terms) / len(terms) if terms else 0.0), len(terms)

    def test_random_scenes(self):
        """Up to 10 superpoints over up to 5 views agree to 1e-9."""
        rng = np.random.default_rng(17)
        for _ in range(40):
            n = int(rng.integers(2, 11))
            views = [self.random_view(rng, n) for _ in range(int(rng.integers(1, 6)))]
            observations = [self.observations(views, k) for k in range(n)]
            for i in range(n):
                for j in range(i + 1, n):
                    expected, m = self.reference(views, i, j)
                    aff, got_m = pair_affinity(observations[i], observations[j])
                    assert got_m == m
                    assert aff == pytest.approx(expected, abs=1e-9)


class TestMergeObservations:
    """Tests for merge_observations."""

    def test_sums_and_weighted_feature(self):
        """Counts add up and features are visible-pixel weighted."""
        merged = merge_observations(
            {0: obs(0, 3, 4, (1.0, 0.0)), 1: obs(1, 2, 2, (0.5,) * 2)},
            {0: obs(0, 1, 4, (0.0, 1.0))},
        )
        assert merged[0].visible_pixels == 4
        assert merged[0].total_pixels == 8
        assert merged[0].mask_feature == pytest.approx((0.75, 0.25))
        assert merged[1] == obs(1, 2, 2, (0.5, 0.5))


class TestProgressiveMerge:
    """Tests for progressive_merge."""

    def test_two_stages(self):
        """Confident pairs merge at the first threshold, weaker ones later."""
        sps, graph, cloud = chain([5, 5, 5, 5])
        observations = {
            0: [obs(0, 10, 10, (1.0, 0.0))],
            1: [obs(0, 10, 10, (1.0, 0.0))],
            2: [obs(0, 8, 10, (0.0, 1.0))],
            3: [obs(0, 8, 10, (0.0, 1.0))],
        }
        result = progressive_merge(
            sps, graph, observations, MergeSchedule(thresholds=(0.9, 0.5)), cloud
        )
        assert result.stage_counts == [3, 2]
        assert [inst.member_superpoints for inst in result.instances] == [(0, 1), (2, 3)]
        assert [inst.instance_id for inst in result.instances] == [0, 1]

    def test_instances_partition_points(self):
        """Instances cover every superpoint point exactly once."""
        sps, graph, cloud = chain([4, 6, 3, 7, 5])
        rng = np.random.default_rng(0)
        observations = {
            sp.sp_id: [obs(0, 10, 10, tuple((0.99 * rng.dirichlet([1, 1, 1])).tolist()))]
            for sp in sps
        }
        result = progressive_merge(sps, graph, observations, linear_schedule(0.9, 0.1, 5), cloud)
        points = np.sort(np.concatenate([inst.point_indices for inst in result.instances]))
        np.testing.assert_array_equal(points, np.arange(cloud.point_count))
        counts = result.stage_counts
        assert all(a >= b for a, b in zip(counts, counts[1:], strict=False))
        for inst in result.instances:
            pts = cloud.positions[inst.point_indices]
            assert inst.aabb.contains(pts).all()
            assert inst.obb.contains(pts).all()

    def test_order_changes_outcome(self):
        """Affinity order and size order pick different first merges."""
        sps, graph, cloud = chain([100, 5, 5])
        observations = {
            0: [obs(0, 10, 10, (1.0, 0.0))],
            1: [obs(0, 10, 10, (0.6, 0.4))],
            2: [obs(0, 10, 10, (0.0, 1.0))],
        }
        schedule = MergeSchedule(thresholds=(0.5,))
        by_affinity = progressive_merge(sps, graph, observations, schedule, cloud)
        by_size = progressive_merge(sps, graph, observations, schedule, cloud, order="size")
        assert [i.member_superpoints for i in by_affinity.instances] == [(0, 1), (2,)]
        assert [i.member_superpoints for i in by_size.instances] == [(0,), (1, 2)]

    def test_observe_fn_recomputes(self):
        """A merged node's observations come from observe_fn when given."""
        sps, graph, cloud = chain([3, 3, 3])
        observations = {k: [obs(0, 10, 10, (1.0, 0.0))] for k in range(3)}
        seen = []

        def observe(points):
            seen.append(len(points))
            return [obs(0, 10, 10, (0.0, 1.0))]

        result = progressive_merge(
            sps, graph, observations, MergeSchedule(thresholds=(0.9,)), cloud, observe_fn=observe
        )
        # after the first merge the recomputed feature no longer matches the third superpoint
        assert seen == [6]
        assert len(result.instances) == 2

    def test_no_edges_keeps_superpoints(self):
        """Without adjacency every superpoint is its own instance."""
        sps, _, cloud = chain([3, 3])
        graph = AdjacencyGraph(nodes=(0, 1))
        observations = {k: [obs(0, 10, 10, (1.0,))] for k in range(2)}
        schedule = MergeSchedule(thresholds=(0.1,))
        result = progressive_merge(sps, graph, observations, schedule, cloud)
        assert len(result.instances) == 2

    def test_unknown_edge(self):
        """Edges to missing superpoints are rejected."""
        sps, _, cloud = chain([3, 3])
        graph = AdjacencyGraph(nodes=(0, 1, 7), edges={(0, 7)})
        with pytest.raises(InputError):
            progressive_merge(sps, graph, {}, MergeSchedule(thresholds=(0.5,)), cloud)

    def test_dump(self, tmp_path):
        """instances.json lists member superpoints and boxes."""
        sps, graph, cloud = chain([3, 3])
        observations = {k: [obs(0, 10, 10, (1.0,))] for k in range(2)}
        schedule = MergeSchedule(thresholds=(0.5,))
        result = progressive_merge(sps, graph, observations, schedule, cloud)
        dump_instances(result.instances, tmp_path / "instances.json")
        data = json.loads((tmp_path / "instances.json").read_text())
        assert data["0"]["superpoints"] == [0, 1]
        assert data["0"]["point_count"] == 6
        assert set(data["0"]["obb"]) == {"center", "half_extents", "yaw"}

    def test_random_graphs(self):
        """Stage counts never rise and instances stay connected in the adjacency graph."""
        rng = np.random.default_rng(23)
        for _ in range(30):
            n = int(rng.integers(2, 11))
            sps, _, cloud = chain([int(s) for s in rng.integers(1, 6, size=n)])
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
            edges = {p for p in pairs if rng.random() < 0.4}
            graph = AdjacencyGraph(nodes=tuple(range(n)), edges=edges)
            n_views, n_masks = int(rng.integers(1, 6)), int(rng.integers(1, 4))
            observations = {
                k: [
                    obs(
                        v,
                        int(rng.integers(1, 11)),
                        10,
                        tuple((0.99 * rng.dirichlet(np.ones(n_masks))).tolist()),
                    )
                    for v in range(n_views)
                ]
                for k in range(n)
            }
            schedule = linear_schedule(
                float(rng.uniform(0.6, 1.0)), float(rng.uniform(0.0, 0.3)), int(rng.integers(2, 7))
            )
            result = progressive_merge(sps, graph, observations, schedule, cloud)

            counts = result.stage_counts
            assert len(counts) == len(schedule.thresholds)
            assert counts[0] <= n
            assert all(a >= b for a, b in zip(counts, counts[1:], strict=False))
            assert counts[-1] == len(result.instances)
            for inst in result.instances:
                members = set(inst.member_superpoints)
                reached, frontier = {min(members)}, [min(members)]
                while frontier:
                    node = frontier.pop()
                    for i, j in edges:
                        other = j if i == node else i if j == node else None
                        if other in members and other not in reached:
                            reached.add(other)
                            frontier.append(other)
                assert reached == members
