"""Mixed-precision training with Lion, loss scaling and quantization-aware fine-tuning."""
