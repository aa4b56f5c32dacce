"""Process-wide operation counters used to audit which sub-networks ran."""

from collections import Counter

counters = Counter()


def hit(name, n=1):
    counters[name] += n


def reset():
    counters.clear()
