"""Conditional denoiser, prompt conditioning, and checkpointing.

The denoiser is a small two-level UNet for 32x32 images. The prompt pathway
is a learned token-embedding table: a prompt template is rendered, split on
whitespace, and the token vectors are mean-pooled into a conditioning vector
that modulates every block via FiLM. Unknown tokens get a deterministic
seeded random row, so embedding the same prompt always yields the same
vector regardless of insertion order.

Forward and backward are written by hand on top of the kernel layer; the
backward pass returns gradients with respect to the parameters, the input
image, and the conditioning vector (the latter is scattered back onto the
token table by the trainers).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ArchitectureMismatchError

CHECKPOINT_FORMAT_VERSION = 1

ID_SLOT = "{id}"
CLASS_SLOT = "{cls}"


@dataclass(frozen=True)
class PromptSpec:
    """Prompt template with an identifier slot and a class-noun slot.

    The class slot is mandatory; the identifier slot is optional so that
    class-generic prior prompts ("a photo of person") fit the same type.
    """

    template: str
    identifier_token: str
    class_token: str

    def __post_init__(self):
        if CLASS_SLOT not in self.template:
            raise ValueError(f"malformed prompt template {self.template!r}: missing {CLASS_SLOT} slot")
        leftover = self.template.replace(ID_SLOT, "").replace(CLASS_SLOT, "")
        if "{" in leftover or "}" in leftover:
            raise ValueError(f"malformed prompt template {self.template!r}: unknown slot syntax")
        for tok in (self.identifier_token, self.class_token):
            if not tok or any(ch.isspace() for ch in tok):
                raise ValueError(f"prompt token {tok!r} must be a single non-empty word")

    @property
    def has_identifier_slot(self) -> bool:
        return ID_SLOT in self.template

    def render(self) -> str:
        return self.template.replace(ID_SLOT, self.identifier_token).replace(CLASS_SLOT, self.class_token)

    def tokens(self) -> list[str]:
        return self.render().split()

    def to_dict(self) -> dict:
        return {
            "template": self.template,
            "identifier_token": self.identifier_token,
            "class_token": self.class_token,
        }

    @staticmethod
    def from_dict(d: dict) -> "PromptSpec":
        return PromptSpec(d["template"], d["identifier_token"], d["class_token"])


def default_descriptor(
    image_size: int = 32,
    channels: int = 3,
    width: int = 16,
    cond_dim: int = 32,
    time_dim: int = 32,
    emb_dim: int = 64,
    embed_seed: int = 0,
    zero_init_out: bool = True,
) -> dict:
    return {
        "kind": "cond_unet",
        "version": 1,
        "image_size": image_size,
        "channels": channels,
        "width": width,
        "cond_dim": cond_dim,
        "time_dim": time_dim,
        "emb_dim": emb_dim,
        "embed_seed": embed_seed,
        "zero_init_out": zero_init_out,
    }


def _token_seed(embed_seed: int, token: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return np.random.SeedSequence([embed_seed, int.from_bytes(digest[:8], "little")])


class CondUNet:
    """Noise predictor eps_hat = f(x_t, t, cond) with exact manual gradients."""

    # (name, cin_factor, cout_factor): channel widths as multiples of `width`;
    # b4/b5 consume skip concatenations, hence the larger input factors.
    _BLOCKS = (("b1", 1, 1), ("b2", 1, 2), ("b3", 2, 2), ("b4", 4, 1), ("b5", 2, 1))

    def __init__(self, descriptor: dict, seed: int = 0, params: dict | None = None, vocab: dict | None = None):
        self.descriptor = dict(descriptor)
        self.vocab: dict[str, int] = dict(vocab) if vocab else {}
        if params is not None:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        else:
            self.params = self._init_params(seed)

    def _init_params(self, seed: int) -> dict:
        d = self.descriptor
        rng = np.random.default_rng(seed)
        w, c = d["width"], d["channels"]
        de, din = d["emb_dim"], d["time_dim"] + d["cond_dim"]
        p: dict[str, np.ndarray] = {}

        def conv(cin, cout):
            std = np.sqrt(2.0 / (cin * 9))
            return rng.normal(0.0, std, size=(cout, cin, 3, 3))

        p["conv_in.w"] = conv(c, w)
        p["conv_in.b"] = np.zeros(w)
        for name, fi, fo in self._BLOCKS:
            cin, cout = fi * w, fo * w
            p[f"{name}.c1.w"] = conv(cin, cout)
            p[f"{name}.c1.b"] = np.zeros(cout)
            p[f"{name}.film.w"] = rng.normal(0.0, 0.02, size=(de, 2 * cout))
            p[f"{name}.film.b"] = np.zeros(2 * cout)
            p[f"{name}.c2.w"] = conv(cout, cout)
            p[f"{name}.c2.b"] = np.zeros(cout)
        if d["zero_init_out"]:
            p["conv_out.w"] = np.zeros((c, w, 3, 3))
        else:
            p["conv_out.w"] = conv(w, c)
        p["conv_out.b"] = np.zeros(c)
        p["emb.w"] = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, de))
        p["emb.b"] = np.zeros(de)
        p["tok_emb"] = np.zeros((0, d["cond_dim"]))
        return p

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # ---- prompt conditioning ----

    def ensure_tokens(self, tokens: list[str]) -> list[int]:
        """Indices for tokens, adding seeded random rows for unseen ones."""
        dc = self.descriptor["cond_dim"]
        new_rows = []
        for tok in tokens:
            if tok not in self.vocab:
                rng = np.random.default_rng(_token_seed(self.descriptor["embed_seed"], tok))
                self.vocab[tok] = len(self.vocab)
                new_rows.append(rng.normal(0.0, 1.0, size=dc))
        if new_rows:
            self.params["tok_emb"] = np.concatenate([self.params["tok_emb"], np.stack(new_rows)], axis=0)
        return [self.vocab[tok] for tok in tokens]

    def encode_prompt(self, spec: PromptSpec):
        """Conditioning vector and the token indices it was pooled from."""
        idx = self.ensure_tokens(spec.tokens())
        cond = self.params["tok_emb"][idx].mean(axis=0)
        return cond, idx

    # ---- forward / backward ----

    def _block_fwd(self, name: str, x, e, cache: dict | None):
        p = self.params
        cout = p[f"{name}.c1.w"].shape[0]
        h1 = nn.conv3x3(x, p[f"{name}.c1.w"], p[f"{name}.c1.b"])
        sb = nn.linear(e, p[f"{name}.film.w"], p[f"{name}.film.b"])
        s, sh = sb[:, :cout], sb[:, cout:]
        h2 = nn.film(h1, s, sh)
        h3 = nn.silu(h2)
        h4 = nn.conv3x3(h3, p[f"{name}.c2.w"], p[f"{name}.c2.b"])
        h5 = nn.silu(h4)
        if cache is not None:
            cache[name] = (x, h1, s, h2, h3, h4)
        return h5

    def _block_bwd(self, name: str, d_out, cache: dict, grads: dict, e):
        p = self.params
        x, h1, s, h2, h3, h4 = cache[name]
        cout = h1.shape[1]
        d4 = nn.silu_grad(h4, d_out)
        d3, grads[f"{name}.c2.w"], grads[f"{name}.c2.b"] = nn.conv3x3_grad(h3, p[f"{name}.c2.w"], d4)
        d2 = nn.silu_grad(h2, d3)
        dh1, ds, dsh = nn.film_grad(h1, s, d2)
        dsb = np.concatenate([ds, dsh], axis=1)
        d_e, grads[f"{name}.film.w"], grads[f"{name}.film.b"] = nn.linear_grad(e, p[f"{name}.film.w"], dsb)
        dx, grads[f"{name}.c1.w"], grads[f"{name}.c1.b"] = nn.conv3x3_grad(x, p[f"{name}.c1.w"], dh1)
        return dx, d_e

    def forward(self, x_t: np.ndarray, t, cond: np.ndarray, want_cache: bool = False):
        """Predict the injected noise. x_t is (n, c, h, w); t is int or (n,)."""
        d = self.descriptor
        x_t = np.asarray(x_t, dtype=np.float64)
        n, c, h, w = x_t.shape
        if c != d["channels"] or h % 4 or w % 4:
            raise ValueError(f"input shape {x_t.shape} incompatible with architecture {d['channels']}ch, /4 spatial")
        t_arr = np.full(n, t, dtype=np.float64) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (n, cond.shape[0]))
        if cond.shape != (n, d["cond_dim"]):
            raise ValueError(f"conditioning shape {cond.shape} != ({n}, {d['cond_dim']})")

        p = self.params
        temb = nn.timestep_embedding(t_arr, d["time_dim"])
        e_in = np.concatenate([temb, cond], axis=1)
        e_pre = nn.linear(e_in, p["emb.w"], p["emb.b"])
        e = nn.silu(e_pre)

        cache: dict | None = {} if want_cache else None
        h_in = nn.conv3x3(x_t, p["conv_in.w"], p["conv_in.b"])
        d1 = self._block_fwd("b1", h_in, e, cache)
        p1 = nn.avgpool2(d1)
        d2 = self._block_fwd("b2", p1, e, cache)
        p2 = nn.avgpool2(d2)
        m3 = self._block_fwd("b3", p2, e, cache)
        u2 = nn.upsample2(m3)
        c2 = np.concatenate([u2, d2], axis=1)
        q2 = self._block_fwd("b4", c2, e, cache)
        u1 = nn.upsample2(q2)
        c1 = np.concatenate([u1, d1], axis=1)
        q1 = self._block_fwd("b5", c1, e, cache)
        out = nn.conv3x3(q1, p["conv_out.w"], p["conv_out.b"])
        if want_cache:
            cache["io"] = (x_t, e_in, e_pre, e, h_in, q1)
            return out, cache
        return out

    def backward(self, cache: dict, d_out: np.ndarray):
        """Gradients of a scalar loss given d_loss/d_output.

        Returns (param_grads, d_x, d_cond); param_grads excludes the token
        table, which callers update through d_cond.
        """
        p = self.params
        d = self.descriptor
        w = d["width"]
        x_t, e_in, e_pre, e, h_in, q1 = cache["io"]
        grads: dict[str, np.ndarray] = {}

        dq1, grads["conv_out.w"], grads["conv_out.b"] = nn.conv3x3_grad(q1, p["conv_out.w"], d_out)
        dc1, de_acc = self._block_bwd("b5", dq1, cache, grads, e)
        dq2 = nn.upsample2_grad(dc1[:, :w])
        dd1_skip = dc1[:, w:]
        dc2, de = self._block_bwd("b4", dq2, cache, grads, e)
        de_acc += de
        dm3 = nn.upsample2_grad(dc2[:, : 2 * w])
        dd2_skip = dc2[:, 2 * w :]
        dp2, de = self._block_bwd("b3", dm3, cache, grads, e)
        de_acc += de
        dd2 = nn.avgpool2_grad(dp2) + dd2_skip
        dp1, de = self._block_bwd("b2", dd2, cache, grads, e)
        de_acc += de
        dd1 = nn.avgpool2_grad(dp1) + dd1_skip
        dh_in, de = self._block_bwd("b1", dd1, cache, grads, e)
        de_acc += de
        dx, grads["conv_in.w"], grads["conv_in.b"] = nn.conv3x3_grad(x_t, p["conv_in.w"], dh_in)

        d_e_pre = nn.silu_grad(e_pre, de_acc)
        d_e_in, grads["emb.w"], grads["emb.b"] = nn.linear_grad(e_in, p["emb.w"], d_e_pre)
        d_cond = d_e_in[:, d["time_dim"] :]
        return grads, dx, d_cond


@dataclass
class Checkpoint:
    """Named, immutable snapshot of denoiser parameters plus its vocab."""

    name: str
    descriptor: dict
    params: dict
    vocab: dict
    metadata: dict

    def restore(self) -> CondUNet:
        return CondUNet(
            copy.deepcopy(self.descriptor),
            params={k: v.copy() for k, v in self.params.items()},
            vocab=dict(self.vocab),
        )

    def save(self, path) -> None:
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "name": self.name,
            "descriptor": self.descriptor,
            "vocab": self.vocab,
            "metadata": self.metadata,
        }
        arrays = {f"p::{k}": v for k, v in self.params.items()}
        np.savez(path, __meta__=np.asarray(json.dumps(meta, sort_keys=True)), **arrays)

    @staticmethod
    def load(path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
                raise ArchitectureMismatchError(
                    f"checkpoint format {meta['format_version']} != supported {CHECKPOINT_FORMAT_VERSION}"
                )
            params = {k[3:]: z[k] for k in z.files if k.startswith("p::")}
        return Checkpoint(meta["name"], meta["descriptor"], params, meta["vocab"], meta["metadata"])


def snapshot(model: CondUNet, name: str, metadata: dict | None = None) -> Checkpoint:
    return Checkpoint(
        name=name,
        descriptor=copy.deepcopy(model.descriptor),
        params={k: v.copy() for k, v in model.params.items()},
        vocab=dict(model.vocab),
        metadata=dict(metadata or {}),
    )


def restore(checkpoint: Checkpoint) -> CondUNet:
    return checkpoint.restore()


def clone(model: CondUNet) -> CondUNet:
    """Independent copy: training the clone never touches the source."""
    return CondUNet(
        copy.deepcopy(model.descriptor),
        params={k: v.copy() for k, v in model.params.items()},
        vocab=dict(model.vocab),
    )


def load_into(model: CondUNet, checkpoint: Checkpoint) -> None:
    """Overwrite a live model's state from a checkpoint of the same architecture."""
    if model.descriptor != checkpoint.descriptor:
        raise ArchitectureMismatchError(
            f"descriptor mismatch: model {model.descriptor} vs checkpoint {checkpoint.descriptor}"
        )
    model.params = {k: v.copy() for k, v in checkpoint.params.items()}
    model.vocab = dict(checkpoint.vocab)


def embed_prompt(spec: PromptSpec, model: CondUNet) -> np.ndarray:
    """Deterministic conditioning vector for a prompt under a given model."""
    cond, _ = model.encode_prompt(spec)
    return cond


def denoise_predict(model: CondUNet, x_t: np.ndarray, t, c: np.ndarray) -> np.ndarray:
    """Noise prediction for x_t at timestep t under conditioning c."""
    return model.forward(x_t, t, c)
