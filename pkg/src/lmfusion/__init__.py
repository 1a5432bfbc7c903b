"""Low-rank multimodal fusion: explicit and factorised tensor fusion, training, benchmarks."""
