"""Feature extractors.

``toy[:d=..,patch=..,seed=..]`` is a deterministic, dependency-free
stand-in used by the tests and for offline smoke runs. Any other id is
treated as a Hugging Face CLIP checkpoint.
"""

import zlib

import numpy as np

from .errors import ModelUnavailable

VISUAL_MODES = ("hidden", "projected")


class ToyBackend:
    """Seeded random projections of pixel patches and character trigrams."""

    buckets = 1024

    def __init__(self, d=64, patch=8, seed=0):
        if d <= 0 or patch <= 0:
            raise ModelUnavailable(f"toy:d={d},patch={patch}", "sizes must be positive")
        self.d_visual = self.d_text = d
        self.patch = patch
        rng = np.random.default_rng(seed)
        k = 3 * patch * patch
        self._pix = rng.standard_normal((k, d)) / np.sqrt(k)
        self._txt = rng.standard_normal((self.buckets, d)) / np.sqrt(self.buckets)

    @classmethod
    def parse(cls, model_id):
        opts = {}
        _, _, rest = model_id.partition(":")
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep or key not in ("d", "patch", "seed"):
                raise ModelUnavailable(model_id, f"bad toy option {item!r}")
            try:
                opts[key] = int(value)
            except ValueError:
                raise ModelUnavailable(model_id, f"bad toy option {item!r}") from None
        return cls(**opts)

    def encode_image(self, image):
        px = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
        p = self.patch
        h, w = px.shape[0] // p, px.shape[1] // p
        if h == 0 or w == 0:
            raise ValueError(f"image smaller than one {p}x{p} patch")
        grid = px[: h * p, : w * p].reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, -1)
        return (grid - 0.5) / 0.25 @ self._pix

    def encode_text(self, prompts):
        rows = []
        for prompt in prompts:
            counts = np.zeros(self.buckets)
            s = f"  {prompt.lower()} "
            for i in range(len(s) - 2):
                counts[zlib.crc32(s[i : i + 3].encode()) % self.buckets] += 1.0
            v = counts @ self._txt
            rows.append(v / max(np.linalg.norm(v), 1e-12))
        return np.stack(rows)


class ClipBackend:
    """Patch-token grid from the vision tower, pooled text features."""

    def __init__(self, model_id, visual="hidden", allow_download=False):
        if visual not in VISUAL_MODES:
            raise ValueError(f"visual mode must be one of {VISUAL_MODES}")
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise ModelUnavailable(model_id, f"torch/transformers not installed ({e})") from e
        try:
            self.model = CLIPModel.from_pretrained(model_id, local_files_only=not allow_download).eval()
            self.processor = CLIPProcessor.from_pretrained(model_id, local_files_only=not allow_download)
        except Exception as e:  # hub, cache and format errors all mean the same thing here
            raise ModelUnavailable(model_id, str(e).splitlines()[0] if str(e) else type(e).__name__) from e
        self.torch = torch
        self.visual = visual
        cfg = self.model.config
        self.d_text = cfg.projection_dim
        self.d_visual = cfg.projection_dim if visual == "projected" else cfg.vision_config.hidden_size

    def encode_image(self, image):
        with self.torch.no_grad():
            inputs = self.processor(images=image.convert("RGB"), return_tensors="pt")
            vm = self.model.vision_model
            tokens = vm(pixel_values=inputs["pixel_values"]).last_hidden_state[0, 1:]
            if self.visual == "projected":
                tokens = self.model.visual_projection(vm.post_layernorm(tokens))
        n, d = tokens.shape
        side = int(round(n**0.5))
        return tokens.reshape(side, side, d).double().numpy()

    def encode_text(self, prompts):
        with self.torch.no_grad():
            inputs = self.processor(text=list(prompts), return_tensors="pt", padding=True)
            return self.model.get_text_features(**inputs).double().numpy()


def load_backend(model_id, visual="hidden", allow_download=False):
    if model_id == "toy" or model_id.startswith("toy:"):
        return ToyBackend.parse(model_id)
    return ClipBackend(model_id, visual=visual, allow_download=allow_download)
