"""ramkit: recurrent acoustic modeling on a synthetic phone corpus.

Subpackages by responsibility:

- numerics: float64 kernels, seeded RNG, matrix file format
- cells: LSTM / GRU / reluGRU / M-reluGRU forward and BPTT backward
- network, training: layer stacks, optimizers, staged schedules
- features: CMN variants, i-vector concatenation, corpus I/O
- ivector: UBM, Baum-Welch statistics, total-variability extraction
- fmllr: per-speaker affine feature transforms
- decoding: bigram Viterbi phone decoding, phone mapping, PER
- harness: synthetic corpus generation and the experiment grid
"""

__version__ = "0.1.0"
