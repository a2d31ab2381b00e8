"""SAM-style ViT image encoder.

Faithful reimplementation of the Segment Anything image encoder:
16x16 patch embedding, transformer blocks with windowed attention and
decomposed relative position embeddings (a few blocks attend globally),
and a two-convolution neck emitting 256 channels at 1/16th resolution.
State-dict keys mirror the reference implementation, so published SAM
checkpoints load directly once the "image_encoder." prefix is stripped;
absolute position embeddings are resized when the input size differs
from the checkpoint's.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class VitSpec:
    embed_dim: int
    depth: int
    num_heads: int
    global_attn_indexes: tuple[int, ...]
    window_size: int = 14
    patch_size: int = 16
    out_chans: int = 256


VARIANTS = {
    "vit_b": VitSpec(768, 12, 12, (2, 5, 8, 11)),
    "vit_l": VitSpec(1024, 24, 16, (5, 11, 17, 23)),
    "vit_h": VitSpec(1280, 32, 16, (7, 15, 23, 31)),
    # tiny variant for tests and smoke runs; not a published checkpoint
    "vit_t": VitSpec(64, 2, 2, (1,), window_size=7),
}


class LayerNorm2d(nn.Module):
    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).permute(0, 2, 3, 1)  # B H W C


class MLPBlock(nn.Module):
    def __init__(self, dim: int, mlp_dim: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, mlp_dim)
        self.lin2 = nn.Linear(mlp_dim, dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.lin2(self.act(self.lin1(x)))


def get_rel_pos(q_size: int, k_size: int, rel_pos: torch.Tensor) -> torch.Tensor:
    """Slice (and interpolate when needed) the relative-position table
    for the attended pair of sizes."""
    max_rel_dist = 2 * max(q_size, k_size) - 1
    if rel_pos.shape[0] != max_rel_dist:
        rel_pos_resized = F.interpolate(
            rel_pos.reshape(1, rel_pos.shape[0], -1).permute(0, 2, 1),
            size=max_rel_dist,
            mode="linear",
        )
        rel_pos_resized = rel_pos_resized.reshape(-1, max_rel_dist).permute(1, 0)
    else:
        rel_pos_resized = rel_pos
    q_coords = torch.arange(q_size)[:, None] * max(k_size / q_size, 1.0)
    k_coords = torch.arange(k_size)[None, :] * max(q_size / k_size, 1.0)
    relative_coords = (q_coords - k_coords) + (k_size - 1) * max(q_size / k_size, 1.0)
    return rel_pos_resized[relative_coords.long()]


def add_decomposed_rel_pos(attn, q, rel_pos_h, rel_pos_w, q_size, k_size):
    q_h, q_w = q_size
    k_h, k_w = k_size
    Rh = get_rel_pos(q_h, k_h, rel_pos_h)
    Rw = get_rel_pos(q_w, k_w, rel_pos_w)
    B, _, dim = q.shape
    r_q = q.reshape(B, q_h, q_w, dim)
    rel_h = torch.einsum("bhwc,hkc->bhwk", r_q, Rh)
    rel_w = torch.einsum("bhwc,wkc->bhwk", r_q, Rw)
    attn = (
        attn.view(B, q_h, q_w, k_h, k_w)
        + rel_h[:, :, :, :, None]
        + rel_w[:, :, :, None, :]
    ).view(B, q_h * q_w, k_h * k_w)
    return attn


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, input_size: tuple[int, int]):
        super().__init__()
        self.num_heads = num_heads
        head_dim = dim // num_heads
        self.scale = head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.rel_pos_h = nn.Parameter(torch.zeros(2 * input_size[0] - 1, head_dim))
        self.rel_pos_w = nn.Parameter(torch.zeros(2 * input_size[1] - 1, head_dim))

    def forward(self, x):
        B, H, W, _ = x.shape
        qkv = self.qkv(x).reshape(B, H * W, 3, self.num_heads, -1).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.reshape(3, B * self.num_heads, H * W, -1).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = add_decomposed_rel_pos(attn, q, self.rel_pos_h, self.rel_pos_w, (H, W), (H, W))
        attn = attn.softmax(dim=-1)
        x = (attn @ v).view(B, self.num_heads, H, W, -1).permute(0, 2, 3, 1, 4).reshape(B, H, W, -1)
        return self.proj(x)


def window_partition(x, window_size: int):
    B, H, W, C = x.shape
    pad_h = (window_size - H % window_size) % window_size
    pad_w = (window_size - W % window_size) % window_size
    if pad_h or pad_w:
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
    Hp, Wp = H + pad_h, W + pad_w
    x = x.view(B, Hp // window_size, window_size, Wp // window_size, window_size, C)
    windows = x.permute(0, 1, 3, 2, 4, 5).contiguous().view(-1, window_size, window_size, C)
    return windows, (Hp, Wp)


def window_unpartition(windows, window_size: int, pad_hw, hw):
    Hp, Wp = pad_hw
    H, W = hw
    B = windows.shape[0] // (Hp * Wp // window_size // window_size)
    x = windows.view(B, Hp // window_size, Wp // window_size, window_size, window_size, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).contiguous().view(B, Hp, Wp, -1)
    if Hp > H or Wp > W:
        x = x[:, :H, :W, :].contiguous()
    return x


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, window_size, input_size, norm_layer):
        super().__init__()
        self.norm1 = norm_layer(dim)
        attn_size = input_size if window_size == 0 else (window_size, window_size)
        self.attn = Attention(dim, num_heads, input_size=attn_size)
        self.norm2 = norm_layer(dim)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))
        self.window_size = window_size

    def forward(self, x):
        shortcut = x
        x = self.norm1(x)
        if self.window_size > 0:
            H, W = x.shape[1], x.shape[2]
            x, pad_hw = window_partition(x, self.window_size)
        x = self.attn(x)
        if self.window_size > 0:
            x = window_unpartition(x, self.window_size, pad_hw, (H, W))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class ImageEncoderViT(nn.Module):
    """Encode a batch of square RGB images into (B, 256, S/16, S/16)."""

    def __init__(self, spec: VitSpec, img_size: int, mlp_ratio: float = 4.0):
        super().__init__()
        if img_size % spec.patch_size != 0:
            raise ValueError(f"img_size {img_size} not divisible by patch {spec.patch_size}")
        self.img_size = img_size
        self.spec = spec
        grid = img_size // spec.patch_size
        norm_layer = partial(nn.LayerNorm, eps=1e-6)
        self.patch_embed = PatchEmbed(spec.patch_size, 3, spec.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid, grid, spec.embed_dim))
        self.blocks = nn.ModuleList([
            Block(
                spec.embed_dim,
                spec.num_heads,
                mlp_ratio,
                0 if i in spec.global_attn_indexes else spec.window_size,
                input_size=(grid, grid),
                norm_layer=norm_layer,
            )
            for i in range(spec.depth)
        ])
        self.neck = nn.Sequential(
            nn.Conv2d(spec.embed_dim, spec.out_chans, 1, bias=False),
            LayerNorm2d(spec.out_chans),
            nn.Conv2d(spec.out_chans, spec.out_chans, 3, padding=1, bias=False),
            LayerNorm2d(spec.out_chans),
        )

    def forward(self, x):
        x = self.patch_embed(x)
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.neck(x.permute(0, 3, 1, 2))


def _resize_pos_embed(pos: torch.Tensor, grid: int) -> torch.Tensor:
    if pos.shape[1] == grid:
        return pos
    resized = F.interpolate(
        pos.permute(0, 3, 1, 2), size=(grid, grid), mode="bicubic", align_corners=False
    )
    return resized.permute(0, 2, 3, 1)


def _resize_rel_pos(table: torch.Tensor, target_len: int) -> torch.Tensor:
    if table.shape[0] == target_len:
        return table
    resized = F.interpolate(
        table.t().unsqueeze(0), size=target_len, mode="linear", align_corners=False
    )
    return resized.squeeze(0).t()


def build_encoder(variant: str, img_size: int) -> ImageEncoderViT:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; options: {sorted(VARIANTS)}")
    return ImageEncoderViT(VARIANTS[variant], img_size)


def load_encoder(variant: str, checkpoint_path, img_size: int,
                 device: str = "cpu") -> ImageEncoderViT:
    """Build the encoder and load weights from a SAM checkpoint (full
    model or bare image-encoder state dict)."""
    model = build_encoder(variant, img_size)
    state = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if any(k.startswith("image_encoder.") for k in state):
        state = {k[len("image_encoder."):]: v for k, v in state.items()
                 if k.startswith("image_encoder.")}
    if "pos_embed" in state:
        state["pos_embed"] = _resize_pos_embed(state["pos_embed"], model.pos_embed.shape[1])
    # global-attention blocks carry rel-pos tables sized for the
    # checkpoint's token grid; rescale them to the requested input size
    current = dict(model.named_parameters())
    for key in list(state):
        if key.endswith((".rel_pos_h", ".rel_pos_w")) and key in current:
            state[key] = _resize_rel_pos(state[key], current[key].shape[0])
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ValueError(
            f"checkpoint does not match variant {variant!r}: {exc}"
        ) from exc
    model.to(device)
    model.eval()
    return model


def make_checkpoint(variant: str, path, seed: int = 0, img_size: int = 1024) -> None:
    """Write a randomly initialized encoder checkpoint (testing aid)."""
    torch.manual_seed(seed)
    model = build_encoder(variant, img_size)
    for p in model.parameters():
        if p.dim() > 1:
            nn.init.xavier_uniform_(p)
        else:
            nn.init.normal_(p, std=0.02)
    torch.save(model.state_dict(), path)
