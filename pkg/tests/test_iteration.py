from contextlib import nullcontext

import pytest

from fuseg3d.errors import ParameterError
from fuseg3d.iteration import all_lengths_combinations, apply_to_all, merge, window_offsets

VOID = None  # Placeholder for cases where an exception is raised


@pytest.mark.parametrize(
    ["iterable", "result", "expectation"],
    [
        ("a", [("a",)], nullcontext()),
        ("ab", [("a",), ("b",), ("a", "b")], nullcontext()),
        (
            ("MSF", "CMA", "GFM"),
            [
                ("MSF",),
                ("CMA",),
                ("GFM",),
                ("MSF", "CMA"),
                ("MSF", "GFM"),
                ("CMA", "GFM"),
                ("MSF", "CMA", "GFM"),
            ],
            nullcontext(),
        ),
        (
            [(1, 2), (3, 4), (5, 6)],
            [
                ((1, 2),),
                ((3, 4),),
                ((5, 6),),
                ((1, 2), (3, 4)),
                ((1, 2), (5, 6)),
                ((3, 4), (5, 6)),
                ((1, 2), (3, 4), (5, 6)),
            ],
            nullcontext(),
        ),
        (iter([1, 2]), [(1,), (2,), (1, 2)], nullcontext()),
        ([], [], nullcontext()),
    ],
)
def test_all_lengths_combinations(iterable, result, expectation):
    with expectation:
        assert list(all_lengths_combinations(iterable)) == result


@pytest.mark.parametrize(
    ["dictionary", "result", "expectation"],
    [
        ({}, {}, nullcontext()),
        ({"a": [1, 2]}, {"a": (1, 2)}, nullcontext()),
        ({"a": {"b": [3], "c": 4}}, {"a": {"b": (3,), "c": 4}}, nullcontext()),
        ([5], (5,), nullcontext()),
    ],
)
def test_apply_to_all(dictionary, result, expectation):
    with expectation:
        assert apply_to_all(dictionary, lambda v: tuple(v) if isinstance(v, list) else v) == result


@pytest.mark.parametrize(
    ["base", "override", "result", "expectation"],
    [
        ({}, {}, {}, nullcontext()),
        ({"a": 1}, {}, {"a": 1}, nullcontext()),
        ({"a": 1}, {"a": 2}, {"a": 2}, nullcontext()),
        ({"a": {"x": 1, "y": 2}}, {"a": {"y": 3}}, {"a": {"x": 1, "y": 3}}, nullcontext()),
        ({"a": {"x": 1}}, {"b": {"z": 0}}, {"a": {"x": 1}, "b": {"z": 0}}, nullcontext()),
        ({"a": {"x": 1}}, {"a": 5}, {"a": 5}, nullcontext()),
    ],
)
def test_merge(base, override, result, expectation):
    with expectation:
        assert merge(base, override) == result


def test_merge_does_not_alias():
    base = {"train": {"lr": 1.0}}
    merged = merge(base, {})
    merged["train"]["lr"] = 2.0
    assert base["train"]["lr"] == 1.0


@pytest.mark.parametrize(
    ["length", "depth", "stride", "result", "expectation"],
    [
        (96, 32, 32, [0, 32, 64], nullcontext()),
        (100, 32, 32, [0, 32, 64, 68], nullcontext()),
        (96, 32, 16, [0, 16, 32, 48, 64], nullcontext()),
        (32, 32, 32, [0], nullcontext()),
        (20, 32, 16, [0], nullcontext()),
        (33, 32, 32, [0, 1], nullcontext()),
        (10, 0, 1, VOID, pytest.raises(ParameterError)),
        (10, 4, 0, VOID, pytest.raises(ParameterError)),
    ],
)
def test_window_offsets(length, depth, stride, result, expectation):
    with expectation:
        assert window_offsets(length, depth, stride) == result


@pytest.mark.parametrize(["length"], [(n,) for n in (1, 31, 32, 33, 64, 95, 100, 257)])
def test_window_offsets_cover_every_slice(length):
    depth = 32
    covered = set()
    for offset in window_offsets(length, depth, depth // 2):
        covered.update(range(offset, min(offset + depth, length)))
    assert covered == set(range(length))
