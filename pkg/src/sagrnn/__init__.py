"""Binaural multi-speaker separation with self-attention gated RNN blocks.

Submodules:

- ``tensor``: reverse-mode autodiff over float64 arrays
- ``layers``: LSTM/BLSTM, self-attention, gated RNN, SA-MULCAT blocks
- ``model``: encoder, chunking, stacked blocks, decoder; SISO and MIMO
- ``training``: SNR objectives, PIT, multi-scale loss, AMSGrad, training loop
- ``checkpoint``: binary checkpoint format
- ``sim``: synthetic binaural scenes and datasets
- ``cues``: gammatone front end, ITD/ILD/azimuth estimation, metrics
- ``evaluation``, ``gradcheck``, ``cli``: batch tooling
"""

__version__ = "0.1.0"
