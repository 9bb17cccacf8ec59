"""unlearnlab: a desk-scale latent-diffusion lab for studying concept unlearning.

Everything runs in float64 numpy on a single CPU: a tape-based autodiff core,
a tiny transformer text encoder, DDPM-style diffusion with classifier-free
guidance, image and video denoisers, a synthetic shape world that stands in
for web-scale data, and a probe-based evaluation harness for measuring what
few-shot gradient ascent on the text encoder removes — and what it spares.
"""

__version__ = "0.1.0"
