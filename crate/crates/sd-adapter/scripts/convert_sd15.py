"""Pack a local diffusers SD v1.x snapshot into the single file the adapter reads.

    python convert_sd15.py SNAPSHOT_DIR out.safetensors

SNAPSHOT_DIR holds unet/, vae/, text_encoder/ and tokenizer/ as downloaded
beforehand (for example with `huggingface-cli download`). The empty-prompt
text embedding is computed once here so the adapter never needs CLIP.
"""

import sys
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file
from transformers import CLIPTextModel, CLIPTokenizer


def weights(part: Path) -> dict:
    for name in ("diffusion_pytorch_model.safetensors", "diffusion_pytorch_model.fp16.safetensors"):
        if (part / name).exists():
            return load_file(str(part / name))
    sys.exit(f"no safetensors weights in {part}")


def main(src: str, dst: str) -> None:
    root = Path(src)
    out = {f"unet.{k}": v.float() for k, v in weights(root / "unet").items()}
    out.update({f"vae.{k}": v.float() for k, v in weights(root / "vae").items()})

    tok = CLIPTokenizer.from_pretrained(root / "tokenizer")
    enc = CLIPTextModel.from_pretrained(root / "text_encoder").eval()
    ids = tok([""], padding="max_length", max_length=tok.model_max_length, return_tensors="pt").input_ids
    with torch.no_grad():
        out["text.empty_context"] = enc(ids)[0][0].float().contiguous()

    meta = {"format": "cellstyle-sd", "version": "1", "heads": "8", "norm_groups": "32", "scaling_factor": "0.18215"}
    save_file(out, dst, metadata=meta)
    print(f"wrote {len(out)} tensors to {dst}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
