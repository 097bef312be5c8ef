"""Target-speaker extraction driven by positive and negative enrolment vectors.

The package is organised as a pipeline:

- ``audio_core``: deterministic DSP primitives (resampling, STFT, SNR mixing).
- ``synth_corpus``: procedural multi-speaker corpus with synchronised visual
  feature tracks, so everything runs with zero external data.
- ``dataset_forge``: mixture synthesis and enrolment sourcing plans (manifests).
- ``nn_blocks``: shape-contracted neural building blocks.
- ``enrolment_net``: teacher (clean audio) and student (noisy audio / visual /
  face) enrolment-vector networks trained by embedding distillation.
- ``separation_net``: waveform U-Net with a transformer bottleneck conditioned
  on sets of positive and negative enrolment vectors.
- ``training_engine``: staged training recipe with seeded determinism.
- ``metrics``: SDR / SI-SDR / STOI and the evaluation harness.
- ``cli``: ``voxvec`` command wiring everything into reproducible runs.
"""

__version__ = "0.1.0"
