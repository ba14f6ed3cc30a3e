"""
Seeded, platform-independent random numbers.

Algorithm: splitmix64 lane seeding followed by the xorshift64* output step.

    lane_i   = splitmix64(state + i * 0x9E3779B97F4A7C15)
    x       ^= x >> 12;  x ^= x << 25;  x ^= x >> 27
    output   = x * 0x2545F4914F6CDD1D            (mod 2**64)

Each draw of ``n`` values consumes ``n`` consecutive counter lanes and
advances the state by ``n``, so bulk draws are vectorized while the stream
stays a pure function of (seed, number of values drawn so far).
"""
import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
SPLITMIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
SPLITMIX_M2 = np.uint64(0x94D049BB133111EB)
XORSHIFT_STAR = np.uint64(0x2545F4914F6CDD1D)
_MASK64 = (1 << 64) - 1


def splitmix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over a uint64 array (wrapping arithmetic)."""
    z = x.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= SPLITMIX_M1
    z ^= z >> np.uint64(27)
    z *= SPLITMIX_M2
    z ^= z >> np.uint64(31)
    return z


def hash_index(index: int, seed: int) -> int:
    """Deterministic 64-bit hash of an integer index under a seed."""
    lane = np.array([(seed * 0x9E3779B97F4A7C15 + index) & _MASK64], dtype=np.uint64)
    return int(splitmix64(lane)[0])


class Rng:
    """xorshift64* generator with splitmix64-seeded counter lanes."""

    algorithm = "splitmix64-xorshift64*"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.state = int(seed) & _MASK64
        self.counter = 0

    def spawn(self, stream: int) -> "Rng":
        """Independent child generator for a named sub-stream."""
        return Rng(hash_index(stream, self.seed))

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        lanes = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            x = splitmix64(np.uint64(self.state) + lanes * GOLDEN_GAMMA)
            # xorshift64* requires a non-zero state
            x[x == 0] = GOLDEN_GAMMA
            x ^= x >> np.uint64(12)
            x ^= x << np.uint64(25)
            x ^= x >> np.uint64(27)
            out = x * XORSHIFT_STAR
        self.counter += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits."""
        bits = self.next_u64(n) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        """Gaussian samples via the Box-Muller transform."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[:pairs]
        u2 = u[pairs:]
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in [low, high) (floor of scaled uniforms)."""
        span = high - low
        return low + np.minimum((self.uniform(n) * span).astype(np.int64), span - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n) driven by this stream."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] * (i + 1))
            j = min(j, i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
