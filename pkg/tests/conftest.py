from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lail.corpus import Dataset, Example  # noqa: E402


@pytest.fixture
def tiny_pool() -> list[Example]:
    return [
        Example("a1", "check whether a number is greater than array elements", "def gt(arr, n):\n    return all(x < n for x in arr)\n"),
        Example("a2", "find the maximum value in an array", "def mx(arr):\n    return max(arr)\n"),
        Example("a3", "check if two lines are parallel", "def para(l1, l2):\n    return l1.slope == l2.slope\n"),
        Example("a4", "reverse the words in a sentence", "def rev(s):\n    return ' '.join(s.split()[::-1])\n"),
        Example("a5", "count vowels in a string", "def vc(s):\n    return sum(c in 'aeiou' for c in s)\n"),
        Example("a6", "check whether a string is a palindrome", "def pal(s):\n    return s == s[::-1]\n"),
    ]


@pytest.fixture
def tiny_dataset(tiny_pool) -> Dataset:
    test = (
        Example("q1", "check whether the entered number is greater than the elements of the given array",
                "def gt(arr, n):\n    return all(x < n for x in arr)\n", ("assert gt([1], 2)",)),
        Example("q2", "count the vowels present in a string", "def vc(s):\n    return sum(c in 'aeiou' for c in s)\n"),
    )
    return Dataset(name="tiny", language_tag="python", train=tuple(tiny_pool), test=test)
