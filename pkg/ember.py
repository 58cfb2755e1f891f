"""
Convenience entrypoint so `python ember.py` works from the repo root.

Examples:
    python ember.py train --synthetic 32 --epochs 1 --activation relu --out runs/relu
    python ember.py quantize --model runs/relu/model.emb --synthetic 32 --out runs/relu-q
    python ember.py bench --model runs/relu/model.emb --quantized runs/relu-q/quantized.emb
"""
import sys

from src.cli.main import main


if __name__ == "__main__":
    sys.exit(main())
