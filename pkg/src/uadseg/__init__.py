"""Label-free brain anomaly segmentation toolkit.

Trains a multimodal vision-transformer autoencoder on healthy slices only,
turns reconstruction residuals into tumor subregion masks, and evaluates
them lesion-wise. Ships a synthetic phantom generator so the whole pipeline
runs end to end without external data.
"""

__version__ = "0.1.0"
