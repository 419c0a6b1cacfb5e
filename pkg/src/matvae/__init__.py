"""Matrix-encoding transformer VAE (matVAE) and its supervised reduction (matENC)
for protein variant effect prediction."""

__version__ = "0.1.0"
