#!/usr/bin/env python3
"""Regenerate the toy-backend golden tensors under tests/golden/.

Run only when the toy backend intentionally changes; commit the outputs.
"""

import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "tests"))

from golden_inputs import golden_config, golden_image_input, golden_text_input  # noqa: E402

from mimic_el.encoders import encode_image, encode_text, write_golden  # noqa: E402


def main() -> None:
    out = REPO / "tests" / "golden"
    out.mkdir(parents=True, exist_ok=True)
    cfg = golden_config()
    _, t_l = encode_text([golden_text_input(cfg)], cfg)
    write_golden(out / "toy_text.bin", t_l[0])
    _, v_l = encode_image([golden_image_input(cfg)], cfg)
    write_golden(out / "toy_image.bin", v_l[0])
    print(f"wrote {out / 'toy_text.bin'} {tuple(t_l[0].shape)}")
    print(f"wrote {out / 'toy_image.bin'} {tuple(v_l[0].shape)}")


if __name__ == "__main__":
    main()
