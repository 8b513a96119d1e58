"""permhop: a desk-scale laboratory for interleaved permutation composition.

The package has three legs:

* exact group arithmetic and task sampling (`perms`, `task`, `embedding`),
* an attention-only transformer with hand-built exact weights and a manual
  reverse-mode gradient engine (`transformer`, `construction`, `grad`),
* one-step curriculum / data-mixture trainers and correlation-geometry
  probes (`train`, `sqgeom`), tied together by a CLI (`cli`).

All numerics are float64 and all randomness flows through explicit
`numpy.random.Generator` arguments, so every result is reproducible from a
seed.
"""

from permhop.perms import Permutation

__all__ = ["Permutation"]
__version__ = "0.1.0"
