"""Deterministic sub-seed derivation.

``derive_seed(master, "gen", "classwise")`` folds each tag into the state with
FNV-1a (64-bit) and scrambles with the SplitMix64 finalizer, so every stage of
a pipeline gets its own stream and can be re-run in isolation.
"""
MASK64 = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in str(text).encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def derive_seed(master, *tags):
    state = int(master) & MASK64
    for tag in tags:
        state = splitmix64(state ^ fnv1a64(tag))
    return state
